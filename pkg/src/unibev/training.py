"""Loss, end-to-end backward pass, AdamW and the desk-scale training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorio
from .features import encoder_backward, encoder_forward, encoder_signature, init_encoder
from .fusion import (FusionConfig, SamplingPlan, Trace, head_backward, head_forward,
                     init_fusion_params, plan_sampling, run_transformer_backward,
                     run_transformer_forward, scatter_to_levels,
                     temporal_average_baseline)
from .geometry import BevGridSpec, Camera, Pose

log = logging.getLogger(__name__)

FUSION_MODES = ("unified", "equal_weight", "no_temporal")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at optimizer step {step}")
        self.step = step


@dataclass(frozen=True)
class LossConfig:
    num_classes: int = 2
    background_weight: float = 0.4

    def __post_init__(self):
        if self.background_weight <= 0:
            raise ValueError("class weights must be positive")

    def class_weights(self) -> np.ndarray:
        w = np.ones(self.num_classes)
        w[0] = self.background_weight
        return w


@dataclass(frozen=True)
class TrainConfig:
    p_train: int = 2
    p_infer: int = 6
    learning_rate: float = 2e-4
    weight_decay: float = 1e-4
    epochs: int = 10
    lr_drop_epoch: int = 8
    seed: int = 0
    fusion_mode: str = "unified"

    def __post_init__(self):
        if self.p_train < 0 or self.p_infer < 0:
            raise ValueError("fusion depths must be >= 0")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")


def weighted_cross_entropy(logits, labels, class_weights):
    """Mean over pixels of w[label] * -log softmax(logits)[label]."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ValueError("labels must match the logits grid")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits - logits.max(-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    lab = labels.astype(np.int64)
    w = np.asarray(class_weights, dtype=np.float64)[lab]
    nll = -np.take_along_axis(logp, lab[..., None], axis=-1)[..., 0]
    n = lab.size
    loss = float((w * nll).sum() / n)
    grad = np.exp(logp)
    np.put_along_axis(grad, lab[..., None], np.take_along_axis(grad, lab[..., None], -1) - 1.0, -1)
    grad *= (w / n)[..., None]
    return loss, grad


# model -----------------------------------------------------------------------

def init_model(cfg: FusionConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = init_encoder(rng, cfg.channels)
    params.update(init_fusion_params(cfg, rng))
    return params


@dataclass
class ForwardCache:
    enc_cache: list
    table: object
    passes: list
    head_cache: tuple
    batch: int
    level_shapes: tuple
    trace: Trace


def model_forward(params, cfg: FusionConfig, images, plan: SamplingPlan,
                  mode: str = "unified", self_regression: bool | None = None):
    """images: (steps * cameras, H, W, 3) newest step first. Returns logits, cache."""
    levels, enc_cache = encoder_forward(params, images)
    table = plan.gather(levels)
    if mode == "equal_weight":
        table = temporal_average_baseline(table)
    sr = cfg.self_regression if self_regression is None else self_regression
    trace = Trace()
    out, passes = run_transformer_forward(params["query"], table, params, cfg, sr, trace)
    logits, hcache = head_forward(out, params, cfg.grid, cfg.num_classes)
    trace.signature.append(encoder_signature(enc_cache))
    return logits, ForwardCache(enc_cache, table, passes, hcache, images.shape[0],
                                plan.level_shapes, trace)


def model_backward(params, cfg: FusionConfig, dlogits, cache: ForwardCache):
    dx, grads = head_backward(dlogits, cache.head_cache, params, cfg.grid, cfg.num_classes)
    dq0, g, dvalues = run_transformer_backward(dx, cache.passes, cache.table, params, cfg, True)
    grads.update(g)
    grads["query"] = dq0
    dlevels = scatter_to_levels(cache.table, dvalues, cache.level_shapes, cache.batch)
    grads.update(encoder_backward(params, cache.enc_cache, dlevels))
    return grads


# frames / datasets -----------------------------------------------------------

@dataclass
class Frame:
    """One supervised sample with its history, newest step first."""
    images: list  # per step (cameras, H, W, 3)
    poses: list  # per step ego->world Pose
    rigs: list  # per step list[Camera]
    labels: np.ndarray
    grid: BevGridSpec
    frame_id: str = ""
    _plans: dict = field(default_factory=dict, repr=False)

    def depth(self, p: int) -> int:
        return min(p, len(self.images) - 1) + 1

    def window(self, p: int):
        k = self.depth(p)
        if k not in self._plans:
            self._plans[k] = plan_sampling(self.poses[:k], self.rigs[:k], self.grid)
        return np.concatenate(self.images[:k], axis=0), self._plans[k]


def _window_depth(mode: str, p: int) -> int:
    return 0 if mode == "no_temporal" else p


def loss_and_grads(params, cfg: FusionConfig, batch: Sequence[Frame], p: int,
                   class_weights, mode: str = "unified"):
    """Summed loss over ``batch`` and its gradients for every parameter."""
    total = 0.0
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    for frame in batch:
        images, plan = frame.window(_window_depth(mode, p))
        logits, cache = model_forward(params, cfg, images, plan, mode)
        loss, dlogits = weighted_cross_entropy(logits, frame.labels, class_weights)
        total += loss
        for k, v in model_backward(params, cfg, dlogits, cache).items():
            grads[k] += v
    return total, grads


def backward(params, cfg: FusionConfig, batch: Sequence[Frame], p: int, class_weights,
             mode: str = "unified"):
    return loss_and_grads(params, cfg, batch, p, class_weights, mode)[1]


def predict_logits(params, cfg: FusionConfig, frame: Frame, p: int, mode: str = "unified"):
    images, plan = frame.window(_window_depth(mode, p))
    logits, _ = model_forward(params, cfg, images, plan, mode)
    return logits


def predict(params, cfg: FusionConfig, frame: Frame, p: int, mode: str = "unified"):
    return predict_logits(params, cfg, frame, p, mode).argmax(-1)


# optimizer -------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr: float, weight_decay: float,
              betas=(0.9, 0.999), eps: float = 1e-8):
    """AdamW update in place; weight decay is decoupled from the moments."""
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if weight_decay:
            p -= lr * weight_decay * p
        if g is None:
            continue
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# training loop ---------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict
    model_config: FusionConfig
    record: list  # per-epoch dicts
    losses: list  # per optimizer step


def evaluate(params, cfg: FusionConfig, frames: Sequence[Frame], p: int,
             mode: str = "unified") -> float:
    from .evalkit import IouAccumulator
    acc = IouAccumulator(cfg.num_classes)
    for f in frames:
        acc.add(predict(params, cfg, f, p, mode), f.labels)
    return acc.mean()


def train_loop(frames: Sequence[Frame], model_cfg: FusionConfig, train_cfg: TrainConfig,
               loss_cfg: LossConfig, eval_frames: Sequence[Frame] = (),
               params: dict | None = None, max_steps: int | None = None) -> TrainResult:
    """Train with window depth ``p_train``; evaluation uses ``p_infer``."""
    if params is None:
        params = init_model(model_cfg, train_cfg.seed)
    params = {k: v.copy() for k, v in params.items()}
    rng = np.random.default_rng(train_cfg.seed + 7919)
    weights = loss_cfg.class_weights()
    state = AdamState()
    record, losses = [], []
    step = 0
    for epoch in range(train_cfg.epochs):
        lr = train_cfg.learning_rate * (0.1 if epoch >= train_cfg.lr_drop_epoch else 1.0)
        order = rng.permutation(len(frames))
        epoch_losses = []
        for idx in order:
            loss, grads = loss_and_grads(params, model_cfg, [frames[idx]], train_cfg.p_train,
                                         weights, train_cfg.fusion_mode)
            if not math.isfinite(loss):
                raise NonFiniteLossError(step, loss)
            adam_step(params, grads, state, lr, train_cfg.weight_decay)
            losses.append(loss)
            epoch_losses.append(loss)
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        entry = {"epoch": epoch, "lr": lr, "loss": float(np.mean(epoch_losses))}
        if eval_frames:
            entry["miou"] = evaluate(params, model_cfg, eval_frames, train_cfg.p_infer,
                                     train_cfg.fusion_mode)
        log.info("epoch %d loss %.4f%s", epoch, entry["loss"],
                 f" mIoU {entry['miou']:.4f}" if "miou" in entry else "")
        record.append(entry)
        if max_steps is not None and step >= max_steps:
            break
    return TrainResult(params, model_cfg, record, losses)


# checkpoints -----------------------------------------------------------------

def config_to_json(cfg: FusionConfig) -> dict:
    d = asdict(cfg)
    d["grid"] = asdict(cfg.grid)
    return d


def config_from_json(d: dict) -> FusionConfig:
    d = dict(d)
    g = dict(d.pop("grid"))
    g["x_range"] = tuple(g["x_range"])
    g["y_range"] = tuple(g["y_range"])
    g["heights"] = tuple(g["heights"])
    return FusionConfig(grid=BevGridSpec(**g), **d)


def save_checkpoint(directory, params, cfg: FusionConfig, record=(), extra: dict | None = None):
    d = Path(directory)
    tensorio.save_params(d / "params", params)
    (d / "model.json").write_text(json.dumps(config_to_json(cfg), indent=2))
    payload = {"record": list(record)}
    if extra:
        payload.update(extra)
    (d / "training.json").write_text(json.dumps(payload, indent=2))


def load_checkpoint(directory):
    d = Path(directory)
    params = tensorio.load_params(d / "params")
    cfg = config_from_json(json.loads((d / "model.json").read_text()))
    meta = json.loads((d / "training.json").read_text())
    return params, cfg, meta

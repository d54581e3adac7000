"""``unibev`` command line: gen, train, infer, eval, coverage, visible-range, plot."""

from __future__ import annotations

import os

# must run before numpy loads its BLAS
if os.environ.get("UNIBEV_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["UNIBEV_THREADS"])

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import evalkit, simulator, tensorio, training
from .fusion import FusionConfig
from .geometry import focal_from_fov, visible_limit

log = logging.getLogger("unibev")

SETTING_CHOICES = sorted(evalkit.SETTINGS)


class CliError(Exception):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _require_dir(path, what) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CliError(f"{what} directory not found: {p}")
    return p


def _require_file(path, what) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} file not found: {p}")
    return p


def _step_name(step: int) -> str:
    return f"step{step:03d}"


# scene directories -------------------------------------------------------------
# <dir>/scene.json, <dir>/frames/stepNNN.ubt (cameras, H, W, 3),
# <dir>/labels/<setting>/stepNNN.ubt

def load_scene_dir(path):
    d = _require_dir(path, "scene")
    scene = simulator.SceneSpec.load(_require_file(d / "scene.json", "scene"))
    renders = {}
    for f in sorted((d / "frames").glob("step*.ubt")):
        renders[int(f.stem[4:])] = tensorio.read_tensor(f).astype(np.float64)
    return scene, renders


def cmd_gen(args):
    setting = evalkit.get_setting(args.setting)
    params = simulator.SceneParams(n_steps=args.steps, layout=args.layout,
                                   occluders=args.occluders)
    scene = simulator.gen_scene(args.seed, params)
    out = Path(args.out)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    lab_dir = out / "labels" / setting.name
    lab_dir.mkdir(parents=True, exist_ok=True)
    scene.save(out / "scene.json")
    for step in range(len(scene.trajectory)):
        tensorio.write_tensor(out / "frames" / f"{_step_name(step)}.ubt",
                              simulator.render_frame(scene, step).images)
        tensorio.write_tensor(lab_dir / f"{_step_name(step)}.ubt",
                              simulator.gt_raster(scene, step, setting))
    print(f"wrote scene seed={args.seed} steps={len(scene.trajectory)} to {out}")


def _frames_from_dirs(dirs, setting, history, which):
    frames = []
    for d in dirs:
        scene, renders = load_scene_dir(d)
        last = len(scene.trajectory) - 1
        steps = [last] if which == "last" else list(range(last + 1))
        for s in steps:
            frames.append(simulator.build_frame(scene, s, setting, history,
                                                frame_id=f"{Path(d).name}_{_step_name(s)}",
                                                renders=renders))
    return frames


def cmd_train(args):
    setting = evalkit.get_setting(args.setting)
    for d in list(args.data) + list(args.val or []):
        _require_dir(d, "scene")
    history = max(args.p_train, args.p_infer)
    frames = _frames_from_dirs(args.data, setting, history, args.frames)
    val = _frames_from_dirs(args.val, setting, history, "last") if args.val else []
    cfg = FusionConfig(grid=setting.bev_grid(), channels=args.channels, layers=args.layers,
                       num_classes=setting.num_classes, self_regression=args.self_regression)
    tc = training.TrainConfig(p_train=args.p_train, p_infer=args.p_infer,
                              learning_rate=args.lr, epochs=args.epochs,
                              lr_drop_epoch=args.lr_drop_epoch if args.lr_drop_epoch is not None
                              else max(0, args.epochs - 2),
                              seed=args.seed, fusion_mode=args.fusion_mode)
    res = training.train_loop(frames, cfg, tc, training.LossConfig(setting.num_classes), val)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extra = {"setting": setting.name, "train_config": asdict(tc)}
    training.save_checkpoint(out, res.params, cfg, res.record, extra)
    (out / "metrics.json").write_text(json.dumps(res.record, indent=2))
    last = res.record[-1]
    msg = f"final loss {last['loss']:.4f}"
    if "miou" in last:
        msg += f" mIoU {last['miou']:.4f}"
    print(msg)


def cmd_infer(args):
    ck = _require_dir(args.checkpoint, "checkpoint")
    params, cfg, meta = training.load_checkpoint(ck)
    setting = evalkit.get_setting(meta.get("setting", args.setting))
    mode = meta.get("train_config", {}).get("fusion_mode", "unified")
    scene, renders = load_scene_dir(args.scene)
    step = len(scene.trajectory) - 1 if args.step is None else args.step
    if not 0 <= step < len(scene.trajectory):
        raise CliError(f"step {step} outside the trajectory")
    frame = simulator.build_frame(scene, step, setting, args.p_infer, renders=renders)
    logits = training.predict_logits(params, cfg, frame, args.p_infer, mode)
    z = logits - logits.max(-1, keepdims=True)
    prob = np.exp(z) / np.exp(z).sum(-1, keepdims=True)
    out = Path(args.out)
    (out / "probs").mkdir(parents=True, exist_ok=True)
    tensorio.write_tensor(out / f"{_step_name(step)}.ubt", logits.argmax(-1))
    tensorio.write_tensor(out / "probs" / f"{_step_name(step)}.ubt", prob)
    print(f"wrote prediction for {_step_name(step)} to {out}")


def cmd_eval(args):
    setting = evalkit.get_setting(args.setting, args.region)
    pred_dir = _require_dir(args.pred, "prediction")
    gt_dir = _require_dir(args.gt, "ground-truth")
    preds = sorted(pred_dir.glob("*.ubt"))
    if not preds:
        raise CliError(f"no .ubt predictions in {pred_dir}")
    acc = evalkit.IouAccumulator(setting.num_classes, evalkit.region_mask(setting))
    rows = []
    for f in preds:
        gt_file = _require_file(gt_dir / f.name, "ground-truth")
        pred = tensorio.read_tensor(f).astype(np.int64)
        gt = tensorio.read_tensor(gt_file).astype(np.int64)
        if pred.shape != gt.shape:
            raise CliError(f"shape mismatch for {f.name}: {pred.shape} vs {gt.shape}")
        res = evalkit.miou(pred, gt, setting)
        rows += [(f.stem, c, float(v)) for c, v in res.per_class.items()]
        acc.add(pred, gt)
    per_class = acc.per_class()
    summary = {"setting": setting.name, "region": setting.region_mode, "frames": len(preds),
               "per_class": {c: (None if np.isnan(v) else round(float(v), 4))
                             for c, v in zip(setting.classes, per_class)},
               "miou": round(acc.mean(), 4)}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evalkit.write_metrics(rows, out / "metrics.csv", out / "metrics.json", summary)
    print(f"mIoU {acc.mean():.4f}")


def cmd_coverage(args):
    if args.scene:
        scene, _ = load_scene_dir(args.scene)
    else:
        scene = simulator.gen_scene(args.seed, simulator.SceneParams(n_steps=args.p_max + 1,
                                                                     layout=args.layout))
    if len(scene.trajectory) < 1:
        raise CliError("scene has an empty trajectory")
    grid = evalkit.get_setting(args.setting).bev_grid()
    rows = simulator.coverage_analysis(scene, args.p_max, grid)
    lines = ["P,unified,warp"] + [f"{r['P']},{r['unified']:.4f},{r['warp']:.4f}" for r in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def cmd_visible_range(args):
    f = focal_from_fov(args.resolution, args.fov)
    d = visible_limit(f, args.n_pixel, args.lane_width)
    print(f"f={f:.4f} d={d:.4f}")


# portable pixmaps ----------------------------------------------------------------

def write_pnm(path, image: np.ndarray):
    """P5 for (H, W) uint8, P6 for (H, W, 3) uint8."""
    img = np.ascontiguousarray(image, dtype=np.uint8)
    magic = b"P5" if img.ndim == 2 else b"P6"
    h, w = img.shape[:2]
    Path(path).write_bytes(magic + b"\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_pnm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    # four header tokens, then exactly one whitespace byte before the raster
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    magic, w, h = fields[0], int(fields[1]), int(fields[2])
    chans = 1 if magic == b"P5" else 3
    arr = np.frombuffer(data, dtype=np.uint8, count=w * h * chans, offset=pos + 1)
    return arr.reshape(h, w) if chans == 1 else arr.reshape(h, w, 3)


def overlay(pred, gt=None) -> np.ndarray:
    """GT foreground white, predicted foreground red on top."""
    pred = np.asarray(pred)
    img = np.zeros(pred.shape + (3,), dtype=np.uint8)
    if gt is not None:
        img[np.asarray(gt) > 0] = 255
    img[pred > 0] = (255, 0, 0)
    return img


def cmd_plot(args):
    arr = tensorio.read_tensor(_require_file(args.input, "input"))
    if arr.ndim == 3:
        # probability grid: foreground confidence as grayscale
        img = np.clip(np.round((1.0 - arr[..., 0]) * 255), 0, 255).astype(np.uint8)
    elif arr.ndim == 2:
        gt = tensorio.read_tensor(_require_file(args.gt, "ground-truth")) if args.gt else None
        if gt is not None and gt.shape != arr.shape:
            raise CliError("prediction and ground truth shapes differ")
        img = overlay(arr, gt)
    else:
        raise CliError(f"cannot plot a rank-{arr.ndim} tensor")
    write_pnm(args.out, img)
    print(f"wrote {args.out}")


# parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="unibev")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, setting_default="desk"):
        p.add_argument("--seed", type=_u64, default=0)
        p.add_argument("--setting", choices=SETTING_CHOICES, default=setting_default)

    p = sub.add_parser("gen", help="generate a synthetic scene")
    common(p)
    p.add_argument("--layout", choices=("straight", "arc", "crossing", "random"),
                   default="straight")
    p.add_argument("--occluders", type=int, default=0)
    p.add_argument("--steps", type=int, default=11)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on scene directories")
    common(p)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--val", nargs="*")
    p.add_argument("--frames", choices=("last", "all"), default="all")
    p.add_argument("--p-train", type=int, default=2)
    p.add_argument("--p-infer", type=int, default=6)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--self-regression", type=_bool, default=True)
    p.add_argument("--fusion-mode", choices=training.FUSION_MODES, default="unified")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--lr-drop-epoch", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict a label grid for one step")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--step", type=int, default=None)
    p.add_argument("--p-infer", type=int, default=6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--region", choices=("full", "easy", "hard"), default="full")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("coverage", help="fusion footprint per fusion depth")
    common(p)
    p.add_argument("--scene")
    p.add_argument("--layout", choices=("straight", "arc", "crossing", "random"),
                   default="straight")
    p.add_argument("--p-max", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_coverage)

    p = sub.add_parser("visible-range", help="focal length and lane visible limit")
    p.add_argument("resolution", type=int)
    p.add_argument("fov", type=float)
    p.add_argument("n_pixel", type=int)
    p.add_argument("lane_width", type=float)
    p.set_defaults(func=cmd_visible_range)

    p = sub.add_parser("plot", help="write a PPM/PGM overlay of a label or probability grid")
    p.add_argument("input")
    p.add_argument("--gt")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        args.func(args)
    except (CliError, ValueError, OSError, tensorio.TensorFormatError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"unibev {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

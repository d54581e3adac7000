"""Unified multi-view fusion transformer (numpy forward and backward).

Every BEV query attends jointly over all (time step, level, height, camera)
samples gathered through virtual views. Tensors are flattened x-major:
query ``(i, j)`` lives at row ``i * y_cells + j``. Sampled-value entries are
ordered ``e = ((p * L + l) * Z + z) * num_cameras + cam``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .features import (NUM_LEVELS, STRIDES, FeatureQueue, MultiScaleFeatures,
                       bilinear_corners, corner_values, pixel_to_cell,
                       position_grads)
from .geometry import (BevGridSpec, Camera, Pose, bev_grid_points,
                       compose_virtual_view, project_points)

LN_EPS = 1e-5
MAX_STEPS = 10  # rows of the temporal positional embedding are 0..MAX_STEPS


@dataclass(frozen=True)
class FusionConfig:
    grid: BevGridSpec
    channels: int = 32
    layers: int = 12
    num_classes: int = 2  # including background (index 0)
    num_points: int = 4  # deformable self-attention sampling points
    ffn_mult: int = 2
    self_regression: bool = True
    max_steps: int = MAX_STEPS
    num_levels: int = NUM_LEVELS

    @property
    def num_heights(self) -> int:
        return len(self.grid.heights)


# sampled value table ---------------------------------------------------------

@dataclass
class SampledValueTable:
    values: np.ndarray  # (Nq, E, C)
    valid: np.ndarray  # (Nq, E)
    num_steps: int
    num_levels: int
    num_heights: int
    num_cameras: int
    sampler: sp.csr_matrix | None = None  # (Nq*E, total feature cells)

    @property
    def num_entries(self) -> int:
        return self.num_steps * self.num_levels * self.num_heights * self.num_cameras

    def entry_indices(self):
        """(p, l, z, cam) index arrays, each of length E."""
        p, l, z, c = np.meshgrid(np.arange(self.num_steps), np.arange(self.num_levels),
                                 np.arange(self.num_heights), np.arange(self.num_cameras),
                                 indexing="ij")
        return p.ravel(), l.ravel(), z.ravel(), c.ravel()

    def step_view(self):
        """values/valid reshaped to (Nq, P+1, L, Z, cams[, C])."""
        shape = (self.values.shape[0], self.num_steps, self.num_levels,
                 self.num_heights, self.num_cameras)
        return self.values.reshape(shape + (-1,)), self.valid.reshape(shape)


@dataclass
class SamplingPlan:
    """Geometry of one fusion window: which feature cells feed which entry.

    Geometry is fixed (not learned), so the plan depends only on poses, rigs
    and the grid; it is reused across forward passes.
    """
    sampler: sp.csr_matrix
    valid: np.ndarray  # (Nq, E)
    num_queries: int
    num_steps: int
    num_levels: int
    num_heights: int
    num_cameras: int
    level_shapes: tuple[tuple[int, int], ...]

    @property
    def num_entries(self):
        return self.num_steps * self.num_levels * self.num_heights * self.num_cameras

    def gather(self, levels: Sequence[np.ndarray]) -> SampledValueTable:
        """``levels``: per level (B, H_l, W_l, C) with B = steps * cameras."""
        c = levels[0].shape[-1]
        flat = np.concatenate([lv.reshape(-1, c) for lv in levels], axis=0)
        values = (self.sampler @ flat).reshape(self.num_queries, self.num_entries, c)
        return SampledValueTable(values, self.valid, self.num_steps, self.num_levels,
                                 self.num_heights, self.num_cameras, self.sampler)


def scatter_to_levels(table: SampledValueTable, dvalues, level_shapes, batch):
    """Adjoint of :meth:`SamplingPlan.gather`."""
    c = dvalues.shape[-1]
    dflat = table.sampler.T @ dvalues.reshape(-1, c)
    out = []
    off = 0
    for h, w in level_shapes:
        n = batch * h * w
        out.append(np.asarray(dflat[off:off + n]).reshape(batch, h, w, c))
        off += n
    return out


def _window_geometry(poses, rigs, spec, num_levels):
    num_steps = len(poses)
    if num_steps == 0:
        raise ValueError("window must be non-empty")
    ncam = len(rigs[0])
    if any(len(r) != ncam for r in rigs):
        raise ValueError("all window entries must share the camera count")
    sizes = {(c.intrinsics.height, c.intrinsics.width) for r in rigs for c in r}
    if len(sizes) != 1:
        raise ValueError("all cameras must share one image size")
    (img_h, img_w), = sizes
    strides = STRIDES[:num_levels]
    level_shapes = tuple((img_h // s, img_w // s) for s in strides)
    return num_steps, ncam, strides, level_shapes


def _iter_entries(poses, rigs, spec, strides, level_shapes):
    """Yield (p, cam, level, entry index per point, corners, ok) per block."""
    pts = bev_grid_points(spec)
    nz = len(spec.heights)
    z_idx = np.arange(len(pts)) % nz
    ncam = len(rigs[0])
    nl = len(strides)
    current = poses[0]
    for p, (pose, rig) in enumerate(zip(poses, rigs)):
        for ci, cam in enumerate(rig):
            view = compose_virtual_view(cam.extrinsic, cam.intrinsics, pose, current, p, cam.id)
            proj = project_points(view, pts)
            for l, s in enumerate(strides):
                h, w = level_shapes[l]
                cr = bilinear_corners(h, w, pixel_to_cell(proj.u, s), pixel_to_cell(proj.v, s))
                ok = proj.valid & cr.in_bounds
                e = ((p * nl + l) * nz + z_idx) * ncam + ci
                yield p, ci, l, e, cr, ok


def window_validity(poses: Sequence[Pose], rigs: Sequence[Sequence[Camera]],
                    spec: BevGridSpec, num_levels: int = NUM_LEVELS) -> np.ndarray:
    """Entry validity (Nq, E) of a window without building the sampler."""
    num_steps, ncam, strides, level_shapes = _window_geometry(poses, rigs, spec, num_levels)
    nz = len(spec.heights)
    nq = spec.num_queries
    n_entries = num_steps * num_levels * nz * ncam
    q_idx = np.arange(nq * nz) // nz
    valid = np.zeros(nq * n_entries, dtype=bool)
    for _, _, _, e, _, ok in _iter_entries(poses, rigs, spec, strides, level_shapes):
        valid[(q_idx * n_entries + e)[ok]] = True
    return valid.reshape(nq, n_entries)


def plan_sampling(poses: Sequence[Pose], rigs: Sequence[Sequence[Camera]],
                  spec: BevGridSpec, num_levels: int = NUM_LEVELS) -> SamplingPlan:
    """Build the sampling plan for a window (``poses[0]`` is the current ego)."""
    num_steps, ncam, strides, level_shapes = _window_geometry(poses, rigs, spec, num_levels)
    cells_per_image = [h * w for h, w in level_shapes]
    batch = num_steps * ncam
    level_offsets = np.cumsum([0] + [batch * n for n in cells_per_image])
    nz = len(spec.heights)
    nq = spec.num_queries
    q_idx = np.arange(nq * nz) // nz
    n_entries = num_steps * num_levels * nz * ncam
    valid = np.zeros(nq * n_entries, dtype=bool)
    rows_all, cols_all, data_all = [], [], []
    for p, ci, l, e, cr, ok in _iter_entries(poses, rigs, spec, strides, level_shapes):
        h, w = level_shapes[l]
        b = p * ncam + ci
        keep = np.nonzero(ok)[0]
        rows = q_idx[keep] * n_entries + e[keep]
        valid[rows] = True
        rows_all.append(np.repeat(rows, 4))
        cols_all.append((level_offsets[l] + b * h * w + cr.index[keep]).ravel())
        data_all.append(cr.weight[keep].ravel())
    rows = np.concatenate(rows_all)
    cols = np.concatenate(cols_all)
    data = np.concatenate(data_all)
    sampler = sp.csr_matrix((data, (rows, cols)), shape=(nq * n_entries, int(level_offsets[-1])))
    return SamplingPlan(sampler, valid.reshape(nq, n_entries), nq, num_steps, num_levels,
                        nz, ncam, level_shapes)


def _stack_window_features(window) -> list[np.ndarray]:
    per_level = []
    for l in range(len(window[0].features[0])):
        per_level.append(np.stack([cam_feats[l].data for e in window for cam_feats in e.features]))
    return per_level


def gather_values(window, bev_spec: BevGridSpec) -> SampledValueTable:
    """Sample every (step, level, height, camera) value for every BEV query.

    ``window`` is newest-first (see :meth:`FeatureQueue.window`); each entry's
    ``features`` is a per-camera sequence of :class:`MultiScaleFeatures`.
    """
    window = list(window)
    if not window:
        raise ValueError("window must be non-empty")
    num_levels = len(window[0].features[0])
    plan = plan_sampling([e.ego_pose for e in window], [e.rig for e in window], bev_spec,
                         num_levels)
    return plan.gather(_stack_window_features(window))


def temporal_average_baseline(table: SampledValueTable) -> SampledValueTable:
    """Equal-weight temporal fusion: replace every step's value by the masked
    mean over steps, per (query, level, height, camera)."""
    values, valid = table.step_view()
    count = valid.sum(axis=1, keepdims=True)
    mean = values.sum(axis=1, keepdims=True) / np.maximum(count, 1)[..., None]
    new_values = np.broadcast_to(mean, values.shape).reshape(table.values.shape).copy()
    new_valid = np.broadcast_to(count > 0, valid.shape).reshape(table.valid.shape).copy()
    sampler = None
    if table.sampler is not None:
        sampler = _averaging_matrix(table) @ table.sampler
        sampler = sp.csr_matrix(sampler)
    return SampledValueTable(new_values, new_valid, table.num_steps, table.num_levels,
                             table.num_heights, table.num_cameras, sampler)


def _averaging_matrix(table: SampledValueTable) -> sp.csr_matrix:
    nq = table.values.shape[0]
    ps = table.num_steps
    inner = table.num_entries // ps
    valid = table.valid.reshape(nq, ps, inner)
    count = valid.sum(axis=1)  # (nq, inner)
    rows, cols, data = [], [], []
    base = (np.arange(nq)[:, None] * table.num_entries + np.arange(inner)[None, :])
    for dst in range(ps):
        for src in range(ps):
            m = valid[:, src, :]
            r = (base + dst * inner)[m]
            c = (base + src * inner)[m]
            rows.append(r)
            cols.append(c)
            data.append(1.0 / count[m])
    n = nq * table.num_entries
    return sp.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n, n))


# parameters ------------------------------------------------------------------

def _uniform(rng, fan_in, shape):
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape)


def init_fusion_params(cfg: FusionConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    c = cfg.channels
    m = cfg.num_points
    u = cfg.grid.upsample_factor
    hid = cfg.ffn_mult * c
    p = {
        "query": rng.normal(0.0, 0.02, size=(cfg.grid.num_queries, c)),
        "in_proj.w": _uniform(rng, 2 * c, (2 * c, c)),
        "in_proj.b": np.zeros(c),
        "pos_embed": rng.normal(0.0, 0.02, size=(cfg.max_steps + 1, cfg.num_levels, cfg.num_heights, c)),
        "ln_f.g": np.ones(c),
        "ln_f.b": np.zeros(c),
        "head.w": _uniform(rng, c, (c, u * u * cfg.num_classes)),
        "head.b": np.zeros(cfg.num_classes),
    }
    ring = np.array([[-1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0]])
    ring = np.resize(ring, (m, 2)) * (1 + np.arange(m)[:, None] // 4)
    for i in range(cfg.layers):
        k = f"layer{i}."
        p.update({
            k + "ln1.g": np.ones(c), k + "ln1.b": np.zeros(c),
            k + "sa.off.w": _uniform(rng, c, (c, 2 * m)),
            k + "sa.off.b": ring.ravel().copy(),
            k + "sa.att.w": _uniform(rng, c, (c, m)),
            k + "sa.att.b": np.zeros(m),
            k + "sa.val.w": _uniform(rng, c, (c, c)),
            k + "sa.val.b": np.zeros(c),
            k + "ln2.g": np.ones(c), k + "ln2.b": np.zeros(c),
            k + "ca.q.w": _uniform(rng, c, (c, c)),
            k + "ca.k.w": _uniform(rng, c, (c, c)),
            k + "ca.v.w": _uniform(rng, c, (c, c)),
            k + "ca.v.b": np.zeros(c),
            k + "ln3.g": np.ones(c), k + "ln3.b": np.zeros(c),
            k + "ffn.w1": _uniform(rng, c, (c, hid)),
            k + "ffn.b1": np.zeros(hid),
            k + "ffn.w2": _uniform(rng, hid, (hid, c)),
            k + "ffn.b2": np.zeros(c),
        })
    return p


# primitive layers ------------------------------------------------------------

def layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xh = xc * inv
    return xh * g + b, (xh, inv, g)


def layer_norm_backward(dy, cache):
    xh, inv, g = cache
    dxh = dy * g
    dx = inv * (dxh - dxh.mean(-1, keepdims=True) - xh * (dxh * xh).mean(-1, keepdims=True))
    return dx, (dy * xh).sum(0), dy.sum(0)


def _softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# deformable self-attention ---------------------------------------------------

def self_attention_forward(x, params, prefix, grid: BevGridSpec, num_points: int):
    nq, c = x.shape
    m = num_points
    val = x @ params[prefix + "sa.val.w"] + params[prefix + "sa.val.b"]
    off = (x @ params[prefix + "sa.off.w"] + params[prefix + "sa.off.b"]).reshape(nq, m, 2)
    a = _softmax(x @ params[prefix + "sa.att.w"] + params[prefix + "sa.att.b"])
    ii, jj = np.divmod(np.arange(nq), grid.y_cells)
    rows = ii[:, None] + off[..., 0]
    cols = jj[:, None] + off[..., 1]
    cr = bilinear_corners(grid.x_cells, grid.y_cells, cols.ravel(), rows.ravel())
    vals = corner_values(val, cr)  # (nq*m, 4, c)
    samp = (cr.weight[..., None] * vals).sum(1).reshape(nq, m, c)
    out = (a[..., None] * samp).sum(1)
    return out, (x, a, samp, vals, cr)


def self_attention_backward(dout, cache, params, prefix):
    x, a, samp, vals, cr = cache
    nq, m, c = samp.shape
    da = (dout[:, None, :] * samp).sum(-1)
    dlogit = a * (da - (a * da).sum(1, keepdims=True))
    dsamp = (a[..., None] * dout[:, None, :]).reshape(-1, c)
    gcol, grow = position_grads(vals, cr, dsamp)
    doff = np.stack([grow, gcol], axis=-1).reshape(nq, 2 * m)
    scat = sp.csr_matrix((cr.weight.ravel(), (np.repeat(np.arange(nq * m), 4), cr.index.ravel())),
                         shape=(nq * m, nq))
    dval = scat.T @ dsamp
    g = {
        prefix + "sa.val.w": x.T @ dval, prefix + "sa.val.b": dval.sum(0),
        prefix + "sa.off.w": x.T @ doff, prefix + "sa.off.b": doff.sum(0),
        prefix + "sa.att.w": x.T @ dlogit, prefix + "sa.att.b": dlogit.sum(0),
    }
    dx = (dval @ params[prefix + "sa.val.w"].T + doff @ params[prefix + "sa.off.w"].T
          + dlogit @ params[prefix + "sa.att.w"].T)
    return dx, g


def deformable_self_attention(q, params, grid: BevGridSpec, prefix: str = "layer0.",
                              num_points: int | None = None):
    """Residual deformable self-attention over the query grid (no normalization)."""
    shape = q.shape
    x = q.reshape(-1, shape[-1])
    m = num_points or params[prefix + "sa.att.w"].shape[1]
    out, _ = self_attention_forward(x, params, prefix, grid, m)
    return (x + out).reshape(shape)


# unified cross-attention -----------------------------------------------------

def cross_attention_forward(x, table: SampledValueTable, params, prefix, pos_embed):
    nq, c = x.shape
    values, valid = table.values, table.valid
    pi, li, zi, _ = table.entry_indices()
    pos_e = pos_embed[pi, li, zi]  # (E, C)
    wq, wk = params[prefix + "ca.q.w"], params[prefix + "ca.k.w"]
    qh = x @ wq
    qk = qh @ wk.T
    scale = 1.0 / np.sqrt(c)
    logits = ((values @ qk[:, :, None])[..., 0] + qk @ pos_e.T) * scale
    has = valid.any(axis=1)
    masked = np.where(valid, logits, -np.inf)
    mx = np.where(has, masked.max(axis=1), 0.0)
    ex = np.where(valid, np.exp(np.where(valid, logits - mx[:, None], 0.0)), 0.0)
    den = ex.sum(axis=1)
    a = ex / np.where(has, den, 1.0)[:, None]
    agg = (a[:, None, :] @ values)[:, 0]
    out = (agg @ params[prefix + "ca.v.w"] + params[prefix + "ca.v.b"]) * has[:, None]
    return out, (x, qh, qk, a, agg, has, pos_e, (pi, li, zi), scale)


def cross_attention_backward(dout, cache, table, params, prefix, need_values: bool):
    x, qh, qk, a, agg, has, pos_e, (pi, li, zi), scale = cache
    values = table.values
    dout = dout * has[:, None]
    g = {prefix + "ca.v.w": agg.T @ dout, prefix + "ca.v.b": dout.sum(0)}
    dagg = dout @ params[prefix + "ca.v.w"].T
    da = (values @ dagg[:, :, None])[..., 0]
    dl = a * (da - (a * da).sum(1, keepdims=True)) * scale
    dqk = (dl[:, None, :] @ values)[:, 0] + dl @ pos_e
    dpos_e = dl.T @ qk
    dpos = np.zeros(params["pos_embed"].shape)
    np.add.at(dpos, (pi, li, zi), dpos_e)
    wq, wk = params[prefix + "ca.q.w"], params[prefix + "ca.k.w"]
    g[prefix + "ca.k.w"] = dqk.T @ qh
    dqh = dqk @ wk
    g[prefix + "ca.q.w"] = x.T @ dqh
    dx = dqh @ wq.T
    dvalues = None
    if need_values:
        dvalues = a[..., None] * dagg[:, None, :] + dl[..., None] * qk[:, None, :]
    return dx, g, dpos, dvalues


def attention_weights(q, table: SampledValueTable, params, prefix: str = "layer0."):
    """Softmax weights (Nq, E) of the cross-attention, zeros on invalid entries."""
    x = q.reshape(-1, q.shape[-1])
    _, cache = cross_attention_forward(x, table, params, prefix, params["pos_embed"])
    return cache[3]


def unified_cross_attention(q, table: SampledValueTable, params, prefix: str = "layer0.",
                            return_skipped: bool = False):
    """Residual unified cross-attention (no normalization).

    Queries without any valid entry pass through unchanged; their indices are
    returned when ``return_skipped`` is set.
    """
    shape = q.shape
    x = q.reshape(-1, shape[-1])
    out, cache = cross_attention_forward(x, table, params, prefix, params["pos_embed"])
    res = (x + out).reshape(shape)
    if return_skipped:
        return res, np.nonzero(~cache[5])[0]
    return res


# feed-forward ----------------------------------------------------------------

def ffn_forward(x, params, prefix):
    pre = x @ params[prefix + "ffn.w1"] + params[prefix + "ffn.b1"]
    h = np.maximum(pre, 0.0)
    return h @ params[prefix + "ffn.w2"] + params[prefix + "ffn.b2"], (x, h, pre > 0)


def ffn_backward(dout, cache, params, prefix):
    x, h, mask = cache
    dh = (dout @ params[prefix + "ffn.w2"].T) * mask
    g = {prefix + "ffn.w2": h.T @ dout, prefix + "ffn.b2": dout.sum(0),
         prefix + "ffn.w1": x.T @ dh, prefix + "ffn.b1": dh.sum(0)}
    return dh @ params[prefix + "ffn.w1"].T, g


# encoder layer / transformer -------------------------------------------------

@dataclass
class Trace:
    layer_applications: int = 0
    skipped_queries: set = field(default_factory=set)
    signature: list = field(default_factory=list)


def encoder_layer_forward(q, table, params, prefix, cfg: FusionConfig, trace: Trace | None = None):
    """Pre-norm layer: self-attention, cross-attention, feed-forward."""
    x1, c1 = layer_norm(q, params[prefix + "ln1.g"], params[prefix + "ln1.b"])
    s, csa = self_attention_forward(x1, params, prefix, cfg.grid, cfg.num_points)
    q = q + s
    x2, c2 = layer_norm(q, params[prefix + "ln2.g"], params[prefix + "ln2.b"])
    o, cca = cross_attention_forward(x2, table, params, prefix, params["pos_embed"])
    q = q + o
    x3, c3 = layer_norm(q, params[prefix + "ln3.g"], params[prefix + "ln3.b"])
    f, cf = ffn_forward(x3, params, prefix)
    q = q + f
    if trace is not None:
        trace.layer_applications += 1
        trace.skipped_queries.update(np.nonzero(~cca[5])[0].tolist())
        cr = csa[4]
        trace.signature.append((cr.col0.tobytes(), cr.row0.tobytes(), cf[2].tobytes()))
    return q, (c1, csa, c2, cca, c3, cf)


def encoder_layer(q, table, params, prefix="layer0.", cfg: FusionConfig | None = None):
    shape = q.shape
    out, _ = encoder_layer_forward(q.reshape(-1, shape[-1]), table, params, prefix, cfg)
    return out.reshape(shape)


def encoder_layer_backward(dq, cache, table, params, prefix, need_values):
    c1, csa, c2, cca, c3, cf = cache
    grads = {}
    dx3, g = ffn_backward(dq, cf, params, prefix)
    grads.update(g)
    dln, grads[prefix + "ln3.g"], grads[prefix + "ln3.b"] = layer_norm_backward(dx3, c3)
    dq = dq + dln
    dx2, g, dpos, dvalues = cross_attention_backward(dq, cca, table, params, prefix, need_values)
    grads.update(g)
    dln, grads[prefix + "ln2.g"], grads[prefix + "ln2.b"] = layer_norm_backward(dx2, c2)
    dq = dq + dln
    dx1, g = self_attention_backward(dq, csa, params, prefix)
    grads.update(g)
    dln, grads[prefix + "ln1.g"], grads[prefix + "ln1.b"] = layer_norm_backward(dx1, c1)
    dq = dq + dln
    return dq, grads, dpos, dvalues


def _accumulate(total: dict, new: dict):
    for k, v in new.items():
        if k in total:
            total[k] = total[k] + v
        else:
            total[k] = v


def run_transformer_forward(q0, table, params, cfg: FusionConfig, self_regression: bool,
                            trace: Trace | None = None):
    passes = []
    w, b = params["in_proj.w"], params["in_proj.b"]
    prev = q0
    for _ in range(2 if self_regression else 1):
        inp = np.concatenate([prev, q0], axis=1)
        x = inp @ w + b
        layer_caches = []
        for i in range(cfg.layers):
            x, cache = encoder_layer_forward(x, table, params, f"layer{i}.", cfg, trace)
            layer_caches.append(cache)
        passes.append((inp, layer_caches))
        prev = x
    return prev, passes


def run_transformer_backward(dout, passes, table, params, cfg: FusionConfig, need_values: bool):
    grads: dict[str, np.ndarray] = {}
    c = cfg.channels
    dq0 = np.zeros((dout.shape[0], c))
    dvalues = np.zeros_like(table.values) if need_values else None
    dpos_total = np.zeros(params["pos_embed"].shape)
    dprev = dout
    for inp, layer_caches in reversed(passes):
        dx = dprev
        for i in range(cfg.layers - 1, -1, -1):
            dx, g, dpos, dv = encoder_layer_backward(dx, layer_caches[i], table, params,
                                                     f"layer{i}.", need_values)
            _accumulate(grads, g)
            dpos_total += dpos
            if need_values:
                dvalues += dv
        _accumulate(grads, {"in_proj.w": inp.T @ dx, "in_proj.b": dx.sum(0)})
        dinp = dx @ params["in_proj.w"].T
        dq0 += dinp[:, c:]
        dprev = dinp[:, :c]
    dq0 += dprev  # first pass input is (q0, q0)
    grads["pos_embed"] = dpos_total
    return dq0, grads, dvalues


def run_transformer(q0, table, params, cfg: FusionConfig, self_regression: bool | None = None,
                    trace: Trace | None = None):
    """Run the encoder stack; with self-regression the output is concatenated
    with the original queries and the same stack is run a second time."""
    sr = cfg.self_regression if self_regression is None else self_regression
    shape = q0.shape
    out, _ = run_transformer_forward(q0.reshape(-1, shape[-1]), table, params, cfg, sr, trace)
    return out.reshape(shape)


# segmentation head -----------------------------------------------------------

def head_forward(x, params, grid: BevGridSpec, num_classes: int):
    """Transposed convolution with kernel = stride = upsample factor."""
    u = grid.upsample_factor
    k = num_classes
    z, cln = layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    small = (z @ params["head.w"]).reshape(grid.x_cells, grid.y_cells, u, u, k)
    logits = small.transpose(0, 2, 1, 3, 4).reshape(grid.x_cells * u, grid.y_cells * u, k)
    return logits + params["head.b"], (z, cln)


def head_backward(dlogits, cache, params, grid: BevGridSpec, num_classes: int):
    z, cln = cache
    u = grid.upsample_factor
    k = num_classes
    g = {"head.b": dlogits.sum(axis=(0, 1))}
    dsmall = dlogits.reshape(grid.x_cells, u, grid.y_cells, u, k).transpose(0, 2, 1, 3, 4)
    dsmall = dsmall.reshape(grid.num_queries, u * u * k)
    g["head.w"] = z.T @ dsmall
    dz = dsmall @ params["head.w"].T
    dx, g["ln_f.g"], g["ln_f.b"] = layer_norm_backward(dz, cln)
    return dx, g


def segmentation_head(q, params, grid: BevGridSpec, num_classes: int):
    """Class logits of shape (X*u, Y*u, num_classes)."""
    logits, _ = head_forward(q.reshape(-1, q.shape[-1]), params, grid, num_classes)
    return logits

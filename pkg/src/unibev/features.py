"""Multi-scale image features: a small conv encoder, bilinear sampling and the
temporal feature queue.

Feature-cell coordinates: cell (i, j) of a level with stride ``s`` is centred
on image pixel ((j + 0.5) * s - 0.5, (i + 0.5) * s - 0.5), so a pixel
coordinate ``u`` maps to ``(u + 0.5) / s - 0.5`` in cells. Pixel centres sit
on integer coordinates.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

STRIDES = (4, 8, 16, 32)
NUM_LEVELS = len(STRIDES)
DEFAULT_CHANNELS = 32


@dataclass(frozen=True)
class FeatureMap:
    data: np.ndarray  # (height, width, channels)
    stride: int

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError("feature data must be (height, width, channels)")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class MultiScaleFeatures:
    levels: tuple[FeatureMap, ...]

    def __post_init__(self):
        strides = [m.stride for m in self.levels]
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise ValueError("level strides must be strictly increasing")
        if len({m.channels for m in self.levels}) > 1:
            raise ValueError("all levels must share the channel width")

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i) -> FeatureMap:
        return self.levels[i]


def pixel_to_cell(u, stride: int):
    return (np.asarray(u, dtype=np.float64) + 0.5) / stride - 0.5


# encoder ---------------------------------------------------------------------

def _conv_names(i):
    return f"enc.conv{i}.w", f"enc.conv{i}.b"


def init_encoder(rng: np.random.Generator, channels: int = DEFAULT_CHANNELS) -> dict[str, np.ndarray]:
    params = {}
    cin = 3
    for i in range(NUM_LEVELS + 1):
        fan_in = 9 * cin
        s = 1.0 / np.sqrt(fan_in)
        wn, bn = _conv_names(i)
        params[wn] = rng.uniform(-s, s, size=(fan_in, channels))
        params[bn] = np.zeros(channels)
        cin = channels
    return params


def _im2col(x):
    """3x3, stride 2, zero padding 1. x: (B, H, W, C) -> (B, H/2, W/2, 9, C)."""
    b, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((b, ho, wo, 9, c), dtype=x.dtype)
    for k in range(9):
        dy, dx = divmod(k, 3)
        cols[:, :, :, k, :] = xp[:, dy:dy + 2 * ho:2, dx:dx + 2 * wo:2, :]
    return cols


def _col2im(dcols, shape):
    b, h, w, c = shape
    ho, wo = h // 2, w // 2
    dxp = np.zeros((b, h + 2, w + 2, c), dtype=dcols.dtype)
    for k in range(9):
        dy, dx = divmod(k, 3)
        dxp[:, dy:dy + 2 * ho:2, dx:dx + 2 * wo:2, :] += dcols[:, :, :, k, :]
    return dxp[:, 1:-1, 1:-1, :]


def encoder_forward(params, images):
    """Run the conv encoder on a batch of images (B, H, W, 3).

    Returns the four feature levels, each (B, H/s, W/s, C), and a cache for
    :func:`encoder_backward`.
    """
    x = np.asarray(images, dtype=np.float64)
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ValueError("images must be (batch, height, width, 3)")
    if x.shape[1] % STRIDES[-1] or x.shape[2] % STRIDES[-1]:
        raise ValueError(f"image size {x.shape[1:3]} not divisible by {STRIDES[-1]}")
    caches = []
    levels = []
    for i in range(NUM_LEVELS + 1):
        wn, bn = _conv_names(i)
        cols = _im2col(x)
        pre = cols.reshape(*cols.shape[:3], -1) @ params[wn] + params[bn]
        out = np.maximum(pre, 0.0)
        caches.append((x.shape, cols, pre > 0))
        x = out
        if i >= 1:
            levels.append(out)
    return levels, caches


def encoder_backward(params, caches, dlevels):
    grads = {}
    dx = None
    for i in range(NUM_LEVELS, -1, -1):
        wn, bn = _conv_names(i)
        shape, cols, mask = caches[i]
        dout = np.zeros(mask.shape) if dx is None else dx
        if i >= 1 and dlevels[i - 1] is not None:
            dout = dout + dlevels[i - 1]
        dpre = dout * mask
        flat = cols.reshape(-1, cols.shape[3] * cols.shape[4])
        dflat = dpre.reshape(-1, dpre.shape[-1])
        grads[wn] = flat.T @ dflat
        grads[bn] = dflat.sum(axis=0)
        if i > 0:
            dcols = (dflat @ params[wn].T).reshape(cols.shape)
            dx = _col2im(dcols, shape)
    return grads


def encode_image(image, params) -> MultiScaleFeatures:
    levels, _ = encoder_forward(params, np.asarray(image)[None])
    return MultiScaleFeatures(tuple(FeatureMap(l[0], s) for l, s in zip(levels, STRIDES)))


def encoder_signature(caches) -> tuple:
    return tuple(c[2].tobytes() for c in caches)


# bilinear sampling -----------------------------------------------------------

@dataclass(frozen=True)
class Corners:
    """Four-neighbour bilinear stencil for a batch of sample positions.

    ``index`` holds flat (row * width + col) indices, ``weight`` the bilinear
    weights with zero for corners that fall outside the grid.
    """
    index: np.ndarray  # (N, 4)
    weight: np.ndarray  # (N, 4)
    inside: np.ndarray  # (N, 4) corner lies on the grid
    frac_u: np.ndarray
    frac_v: np.ndarray
    col0: np.ndarray
    row0: np.ndarray
    in_bounds: np.ndarray  # sample inside [0, w-1] x [0, h-1]


def bilinear_corners(height: int, width: int, u, v) -> Corners:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    finite = np.isfinite(u) & np.isfinite(v)
    us = np.where(finite, u, -10.0)
    vs = np.where(finite, v, -10.0)
    c0 = np.floor(us)
    r0 = np.floor(vs)
    fu = us - c0
    fv = vs - r0
    c0 = c0.astype(np.int64)
    r0 = r0.astype(np.int64)
    cols = np.stack([c0, c0 + 1, c0, c0 + 1], axis=1)
    rows = np.stack([r0, r0, r0 + 1, r0 + 1], axis=1)
    w = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=1)
    inside = (cols >= 0) & (cols < width) & (rows >= 0) & (rows < height) & finite[:, None]
    index = np.where(inside, rows * width + cols, 0)
    w = np.where(inside, w, 0.0)
    in_bounds = finite & (u >= 0) & (u <= width - 1) & (v >= 0) & (v <= height - 1)
    return Corners(index, w, inside, fu, fv, c0, r0, in_bounds)


def bilinear_sample(fmap: FeatureMap, u: float, v: float) -> tuple[np.ndarray, bool]:
    """Sample ``fmap`` at feature-cell coordinates (u = column, v = row).

    Out-of-bounds samples return zeros and ``False``.
    """
    data = fmap.data
    h, w, c = data.shape
    cr = bilinear_corners(h, w, u, v)
    if not cr.in_bounds[0]:
        return np.zeros(c, dtype=data.dtype), False
    flat = data.reshape(-1, c)
    return cr.weight[0] @ flat[cr.index[0]], True


@dataclass(frozen=True)
class SampleGrad:
    index: np.ndarray  # flat cell indices touched (4,)
    grad_data: np.ndarray  # (4, C) update for those cells
    grad_u: float
    grad_v: float


def corner_values(flat, cr: Corners):
    """Corner values (N, 4, C) with zeros outside the grid."""
    return flat[cr.index] * cr.inside[..., None]


def position_grads(vals, cr: Corners, upstream):
    """d(sample . upstream) / d(u, v) for stencil values ``vals`` (N, 4, C)."""
    fu = cr.frac_u[:, None]
    fv = cr.frac_v[:, None]
    du = (1 - fv) * (vals[:, 1] - vals[:, 0]) + fv * (vals[:, 3] - vals[:, 2])
    dv = (1 - fu) * (vals[:, 2] - vals[:, 0]) + fu * (vals[:, 3] - vals[:, 1])
    return (du * upstream).sum(-1), (dv * upstream).sum(-1)


def bilinear_sample_grad(fmap: FeatureMap, u: float, v: float, upstream) -> SampleGrad:
    data = fmap.data
    h, w, c = data.shape
    up = np.asarray(upstream, dtype=np.float64).reshape(1, c)
    cr = bilinear_corners(h, w, u, v)
    if not cr.in_bounds[0]:
        return SampleGrad(cr.index[0], np.zeros((4, c)), 0.0, 0.0)
    vals = corner_values(data.reshape(-1, c), cr)
    gu, gv = position_grads(vals, cr, up)
    return SampleGrad(cr.index[0], cr.weight[0][:, None] * up, float(gu[0]), float(gv[0]))


# feature queue ---------------------------------------------------------------

@dataclass(frozen=True)
class QueueEntry:
    step_index: int
    features: Any  # per-camera MultiScaleFeatures, or batched level arrays
    ego_pose: Any
    rig: Sequence[Any] = field(default_factory=tuple)


class FeatureQueue:
    """Newest-first ring buffer of the last ``capacity`` frames."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._entries: deque[QueueEntry] = deque(maxlen=capacity)

    def __len__(self):
        return len(self._entries)

    def push(self, entry: QueueEntry) -> "FeatureQueue":
        if self._entries:
            newest = self._entries[0]
            if entry.step_index <= newest.step_index:
                raise ValueError(f"step {entry.step_index} is not newer than {newest.step_index}")
            if len(entry.rig) != len(newest.rig):
                raise ValueError("camera count changed between queue entries")
        self._entries.appendleft(entry)
        return self

    def window(self, p: int) -> tuple[QueueEntry, ...]:
        """The current entry plus up to ``p`` past ones, newest first."""
        if p < 0:
            raise ValueError("p must be >= 0")
        return tuple(list(self._entries)[: p + 1])

    @property
    def steps(self) -> list[int]:
        return [e.step_index for e in self._entries]

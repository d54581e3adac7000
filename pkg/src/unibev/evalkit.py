"""Map rasterization, evaluation settings, region masks, mIoU and city split.

Raster layout: row ``r`` covers ego x in ``[x_min + r*res, x_min + (r+1)*res)``
and column ``c`` covers ego y in ``[y_min + c*res, ...)``. Rows follow the BEV
query ordering (x-major), so head logits and label grids share one layout.
The ego origin falls on pixel ``(-x_min/res, -y_min/res)``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geometry import BevGridSpec

REGION_MODES = ("full", "easy", "hard")
TRAIN_LOCATIONS = ("singapore-queenstown", "singapore-hollandvillage")
VAL_LOCATIONS = ("singapore-onenorth", "boston-seaport")


@dataclass(frozen=True)
class EvalSetting:
    name: str
    x_range: tuple[float, float]  # (-rear, front)
    y_range: tuple[float, float]  # (-right, left)
    query_cells: tuple[int, int]
    upsample_factor: int
    classes: tuple[str, ...]  # foreground classes; index 0 is background
    line_width_px: int = 3
    region_mode: str = "full"
    # scene element class -> setting class name
    class_map: Mapping[str, str] = field(default_factory=dict)
    polygon_classes: tuple[str, ...] = ()
    easy_box: tuple[float, float, float, float] | None = None  # front, rear, left, right

    def __post_init__(self):
        if self.region_mode not in REGION_MODES:
            raise ValueError(f"unknown region mode {self.region_mode!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.query_cells[0] * self.upsample_factor,
                self.query_cells[1] * self.upsample_factor)

    @property
    def resolution(self) -> tuple[float, float]:
        h, w = self.shape
        return ((self.x_range[1] - self.x_range[0]) / h,
                (self.y_range[1] - self.y_range[0]) / w)

    @property
    def num_classes(self) -> int:
        return len(self.classes) + 1

    @property
    def ego_pixel(self) -> tuple[float, float]:
        rx, ry = self.resolution
        return (-self.x_range[0] / rx, -self.y_range[0] / ry)

    def class_index(self, element_class: str) -> int:
        name = self.class_map.get(element_class, element_class)
        return self.classes.index(name) + 1 if name in self.classes else 0

    def bev_grid(self, heights=(-3.0, -1.0, 1.0, 3.0)) -> BevGridSpec:
        return BevGridSpec(self.query_cells[0], self.query_cells[1], self.x_range,
                           self.y_range, tuple(heights), self.upsample_factor)

    def with_region(self, mode: str) -> "EvalSetting":
        return replace(self, region_mode=mode)


_LINE_MAP = {"divider": "divider", "boundary": "boundary", "ped_crossing": "ped_crossing"}

SETTINGS: dict[str, EvalSetting] = {
    "100x100": EvalSetting("100x100", (-50.0, 50.0), (-50.0, 50.0), (50, 50), 4,
                           ("road", "lane"),
                           class_map={"divider": "lane", "road": "road"},
                           polygon_classes=("road",)),
    "60x30": EvalSetting("60x30", (-30.0, 30.0), (-15.0, 15.0), (100, 50), 4,
                         ("boundary", "divider", "ped_crossing"), class_map=_LINE_MAP),
    "160x100": EvalSetting("160x100", (-60.0, 100.0), (-50.0, 50.0), (80, 50), 8,
                           ("boundary", "divider", "ped_crossing"), class_map=_LINE_MAP,
                           easy_box=(50.0, 30.0, 30.0, 30.0)),
    # desk-scale setting for the synthetic training experiments
    "desk": EvalSetting("desk", (-16.0, 16.0), (-16.0, 16.0), (16, 16), 4, ("lane",),
                        class_map={"divider": "lane", "boundary": "lane"},
                        easy_box=(8.0, 8.0, 8.0, 8.0)),
}


def get_setting(name: str, region: str = "full") -> EvalSetting:
    try:
        s = SETTINGS[name]
    except KeyError:
        raise ValueError(f"unknown setting {name!r}; choose from {sorted(SETTINGS)}") from None
    return s.with_region(region)


# rasterization ---------------------------------------------------------------

def to_pixels(points, setting: EvalSetting) -> np.ndarray:
    """Continuous (row, col) raster coordinates of ego-frame (x, y) points."""
    pts = np.asarray(points, dtype=np.float64)[:, :2]
    rx, ry = setting.resolution
    return np.stack([(pts[:, 0] - setting.x_range[0]) / rx,
                     (pts[:, 1] - setting.y_range[0]) / ry], axis=1)


def _round_half_up(num, den):
    """round(num / den) with halves rounded up; den > 0, integer arrays."""
    return np.floor_divide(2 * num + den, 2 * den)


def line_pixels(r0: int, c0: int, r1: int, c1: int, bounds=None) -> np.ndarray:
    """Integer line traversal from (r0, c0) to (r1, c1), inclusive.

    Steps once per pixel along the major axis; the minor coordinate is the
    ideal line value rounded half up. ``bounds=(h, w)`` skips steps that cannot
    land within 2 pixels of the grid, without changing the traversed pixels.
    """
    dr, dc = r1 - r0, c1 - c0
    n = max(abs(dr), abs(dc))
    if n == 0:
        return np.array([[r0, c0]], dtype=np.int64)
    t_lo, t_hi = 0, n
    if bounds is not None:
        for a0, d, size in ((r0, dr, bounds[0]), (c0, dc, bounds[1])):
            # a0 + t*d/n within [-2, size+1]; loose integer bounds, then filter
            if d == 0:
                if a0 < -2 or a0 > size + 1:
                    return np.zeros((0, 2), dtype=np.int64)
                continue
            lo = (-3 - a0) * n / d
            hi = (size + 2 - a0) * n / d
            lo, hi = min(lo, hi), max(lo, hi)
            t_lo = max(t_lo, int(np.floor(lo)))
            t_hi = min(t_hi, int(np.ceil(hi)))
        if t_lo > t_hi:
            return np.zeros((0, 2), dtype=np.int64)
    t = np.arange(t_lo, t_hi + 1, dtype=np.int64)
    rows = r0 + _round_half_up(t * dr, n)
    cols = c0 + _round_half_up(t * dc, n)
    return np.stack([rows, cols], axis=1)


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return mask
    h, w = mask.shape
    padded = np.pad(mask, radius)
    out = np.zeros_like(mask)
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            out |= padded[radius + dr:radius + dr + h, radius + dc:radius + dc + w]
    return out


def rasterize_polyline(points, setting: EvalSetting, class_id: int) -> np.ndarray:
    """Label delta: ``class_id`` on the dilated line pixels, 0 elsewhere."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) < 2:
        raise ValueError("a polyline needs at least two points")
    h, w = setting.shape
    pad = setting.line_width_px // 2
    pix = np.floor(to_pixels(pts, setting)).astype(np.int64)
    # padded canvas so trace pixels just off the grid still dilate inwards
    canvas = np.zeros((h + 2 * pad, w + 2 * pad), dtype=bool)
    for (r0, c0), (r1, c1) in zip(pix[:-1], pix[1:]):
        lp = line_pixels(int(r0), int(c0), int(r1), int(c1), bounds=(h, w))
        keep = ((lp[:, 0] >= -pad) & (lp[:, 0] < h + pad)
                & (lp[:, 1] >= -pad) & (lp[:, 1] < w + pad))
        lp = lp[keep]
        canvas[lp[:, 0] + pad, lp[:, 1] + pad] = True
    trace = _dilate(canvas, pad)[pad:pad + h, pad:pad + w]
    return np.where(trace, class_id, 0).astype(np.int64)


def rasterize_polygon(points, setting: EvalSetting, class_id: int) -> np.ndarray:
    """Fill pixels whose centres fall inside the polygon (even-odd rule)."""
    poly = to_pixels(np.asarray(points, dtype=np.float64), setting)
    h, w = setting.shape
    rr, cc = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    inside = np.zeros((h, w), dtype=bool)
    a = poly
    b = np.roll(poly, -1, axis=0)
    for (ar, ac), (br, bc) in zip(a, b):
        crosses = (ac > cc) != (bc > cc)
        with np.errstate(divide="ignore", invalid="ignore"):
            r_at = ar + (cc - ac) * (br - ar) / (bc - ac)
        inside ^= crosses & (rr < r_at)
    return np.where(inside, class_id, 0).astype(np.int64)


def rasterize_map(elements: Iterable, setting: EvalSetting) -> np.ndarray:
    """Compose a label grid from ``(points, element_class)`` pairs.

    Polygons first, then lines; within each group classes are drawn in
    ascending index order and later elements overwrite earlier ones.
    """
    h, w = setting.shape
    grid = np.zeros((h, w), dtype=np.int64)
    items = []
    for order, (pts, cls) in enumerate(elements):
        idx = setting.class_index(cls)
        if idx == 0:
            continue
        is_poly = setting.class_map.get(cls, cls) in setting.polygon_classes
        items.append((0 if is_poly else 1, idx, order, pts, is_poly))
    for _, idx, _, pts, is_poly in sorted(items, key=lambda t: t[:3]):
        delta = (rasterize_polygon if is_poly else rasterize_polyline)(pts, setting, idx)
        grid = np.where(delta > 0, delta, grid)
    return grid


# regions and metrics ---------------------------------------------------------

def region_mask(setting: EvalSetting, mode: str | None = None) -> np.ndarray:
    mode = setting.region_mode if mode is None else mode
    if mode not in REGION_MODES:
        raise ValueError(f"unknown region mode {mode!r}")
    h, w = setting.shape
    if mode == "full":
        return np.ones((h, w), dtype=bool)
    if setting.easy_box is None:
        raise ValueError(f"setting {setting.name} has no easy/hard split")
    front, rear, left, right = setting.easy_box
    rx, ry = setting.resolution
    xc = setting.x_range[0] + (np.arange(h) + 0.5) * rx
    yc = setting.y_range[0] + (np.arange(w) + 0.5) * ry
    easy = ((xc >= -rear) & (xc < front))[:, None] & ((yc >= -right) & (yc < left))[None, :]
    return easy if mode == "easy" else ~easy


def iou_counts(pred, gt, num_classes: int, mask=None):
    """(intersection, union) per foreground class 1..num_classes-1."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if mask is not None:
        pred = pred[mask]
        gt = gt[mask]
    inter = np.zeros(num_classes - 1, dtype=np.int64)
    union = np.zeros(num_classes - 1, dtype=np.int64)
    for k in range(1, num_classes):
        p = pred == k
        g = gt == k
        inter[k - 1] = np.count_nonzero(p & g)
        union[k - 1] = np.count_nonzero(p | g)
    return inter, union


@dataclass
class IouResult:
    per_class: dict  # class name -> IoU (nan if absent from both)
    mean: float


def miou(pred, gt, setting: EvalSetting) -> IouResult:
    inter, union = iou_counts(pred, gt, setting.num_classes, region_mask(setting))
    with np.errstate(divide="ignore", invalid="ignore"):
        ious = np.where(union > 0, inter / np.maximum(union, 1), np.nan)
    present = union > 0
    mean = float(ious[present].mean()) if present.any() else float("nan")
    return IouResult(dict(zip(setting.classes, ious.tolist())), mean)


class IouAccumulator:
    """Dataset-level IoU: intersections and unions summed over frames."""

    def __init__(self, num_classes: int, mask=None):
        self.num_classes = num_classes
        self.mask = mask
        self.inter = np.zeros(num_classes - 1, dtype=np.int64)
        self.union = np.zeros(num_classes - 1, dtype=np.int64)

    def add(self, pred, gt):
        i, u = iou_counts(pred, gt, self.num_classes, self.mask)
        self.inter += i
        self.union += u

    def per_class(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.union > 0, self.inter / np.maximum(self.union, 1), np.nan)

    def mean(self) -> float:
        ious = self.per_class()
        ok = ~np.isnan(ious)
        return float(ious[ok].mean()) if ok.any() else float("nan")


def write_metrics(rows: Sequence[tuple[str, str, float]], csv_path, json_path, summary: dict):
    with open(csv_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["frame_id", "class", "iou"])
        for frame_id, cls, iou in rows:
            wr.writerow([frame_id, cls, "nan" if iou != iou else f"{iou:.4f}"])
    Path(json_path).write_text(json.dumps(summary, indent=2))


# split -----------------------------------------------------------------------

@dataclass
class SplitManifest:
    assignment: dict  # scene id -> "train" | "val"
    location: dict  # scene id -> location

    def counts(self) -> dict:
        out = {"train": 0, "val": 0}
        for v in self.assignment.values():
            out[v] += 1
        return out

    def to_json(self) -> dict:
        return {"scenes": {k: {"split": v, "location": self.location[k]}
                           for k, v in sorted(self.assignment.items())},
                "counts": self.counts()}


def city_split(scenes: Iterable[Mapping]) -> SplitManifest:
    assignment, location = {}, {}
    for s in scenes:
        loc = s["location"]
        if loc in TRAIN_LOCATIONS:
            split = "train"
        elif loc in VAL_LOCATIONS:
            split = "val"
        else:
            raise ValueError(f"unknown location {loc!r}")
        assignment[s["id"]] = split
        location[s["id"]] = loc
    return SplitManifest(assignment, location)

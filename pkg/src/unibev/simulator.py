"""Synthetic multi-camera driving scenes on a flat ground plane.

The world ground is the plane z = 0. The ego origin rides ``EGO_HEIGHT`` metres
above it, so in ego coordinates the ground sits at z = -1, which is one of the
default sampling heights. Steps are 0.2 s apart.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .evalkit import EvalSetting, rasterize_map
from .fusion import window_validity
from .geometry import (BevGridSpec, Camera, Intrinsics, Pose, RigManifest,
                       bev_grid_points, camera_rotation, compose_virtual_view,
                       project_points)

EGO_HEIGHT = 1.0
CAMERA_HEIGHT = 0.5  # above the ego origin
STEP_SECONDS = 0.2
MAX_RANGE = 60.0
TEXTURE_RES = 0.1

COLORS = {
    "sky": (0.55, 0.70, 0.90),
    "ground": (0.22, 0.22, 0.22),
    "road": (0.32, 0.32, 0.32),
    "occluder": (0.50, 0.42, 0.36),
    "divider": (0.95, 0.95, 0.95),
    "boundary": (0.95, 0.85, 0.20),
    "ped_crossing": (0.80, 0.80, 0.85),
}
LINE_CLASSES = ("divider", "boundary", "ped_crossing")

# nuScenes-like layout: (id, yaw degrees, fov degrees)
DEFAULT_RIG_LAYOUT = (
    ("CAM_FRONT", 0.0, 70.0),
    ("CAM_FRONT_LEFT", 55.0, 70.0),
    ("CAM_FRONT_RIGHT", -55.0, 70.0),
    ("CAM_BACK_LEFT", 125.0, 70.0),
    ("CAM_BACK_RIGHT", -125.0, 70.0),
    ("CAM_BACK", 180.0, 110.0),
)


def default_rig(image_size=(64, 128), pitch_down_deg: float = 8.0,
                mount_radius: float = 1.0) -> list[Camera]:
    h, w = image_size
    rig = []
    for cam_id, yaw_deg, fov in DEFAULT_RIG_LAYOUT:
        yaw = math.radians(yaw_deg)
        pos = (mount_radius * math.cos(yaw), mount_radius * math.sin(yaw), CAMERA_HEIGHT)
        rig.append(Camera(cam_id, Intrinsics.from_fov(w, h, fov),
                          Pose(camera_rotation(yaw, math.radians(pitch_down_deg)), pos)))
    return rig


@dataclass(frozen=True)
class Element:
    points: np.ndarray  # (N, 2) world xy
    cls: str

    def to_json(self):
        return {"class": self.cls, "points": np.asarray(self.points).tolist()}


@dataclass(frozen=True)
class Occluder:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    active_steps: frozenset

    def active(self, step: int) -> bool:
        return step in self.active_steps

    def to_json(self):
        return {"center": list(self.center), "size": list(self.size),
                "active_steps": sorted(self.active_steps)}


@dataclass(frozen=True)
class SceneParams:
    n_steps: int = 11
    layout: str = "random"  # straight | arc | crossing | random
    n_lanes: int = 4  # painted lines across the road
    lane_spacing: float = 3.5
    speed: float | None = None  # m/s; drawn from speed_range when None
    speed_range: tuple[float, float] = (4.0, 12.0)
    max_yaw_rate: float = 0.25  # rad/s, bounds the curvature
    lateral_jitter: float = 1.5
    heading_jitter: float = 0.05
    occluders: int = 0
    image_size: tuple[int, int] = (64, 128)
    lane_half_width: float = 0.75
    road: bool = False


@dataclass
class SceneSpec:
    seed: int
    elements: list[Element]
    trajectory: list[Pose]
    occluders: list[Occluder]
    rig: list[Camera]
    lane_half_width: float = 0.75
    _texture: object = field(default=None, repr=False, compare=False)

    @property
    def lanes(self) -> list[Element]:
        return [e for e in self.elements if e.cls in LINE_CLASSES]

    def to_json(self) -> dict:
        d = RigManifest(self.rig, self.trajectory).to_json()
        d.update(seed=self.seed, lane_half_width=self.lane_half_width,
                 lanes=[e.to_json() for e in self.elements],
                 occluders=[o.to_json() for o in self.occluders])
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        man = RigManifest.from_json(d)
        return cls(int(d.get("seed", 0)),
                   [Element(np.asarray(e["points"], dtype=np.float64), e["class"])
                    for e in d.get("lanes", [])],
                   man.trajectory,
                   [Occluder(tuple(o["center"]), tuple(o["size"]), frozenset(o["active_steps"]))
                    for o in d.get("occluders", [])],
                   man.cameras, float(d.get("lane_half_width", 0.75)))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_json(json.loads(Path(path).read_text()))


# scene generation ------------------------------------------------------------

def _trajectory(n_steps, speed, yaw_rate, heading=0.0):
    poses = []
    x = y = 0.0
    yaw = heading
    for _ in range(n_steps):
        poses.append(Pose.from_yaw(yaw, (x, y, EGO_HEIGHT)))
        x += speed * STEP_SECONDS * math.cos(yaw)
        y += speed * STEP_SECONDS * math.sin(yaw)
        yaw += yaw_rate * STEP_SECONDS
    return poses


def _offset_curve(centre: np.ndarray, offset: float) -> np.ndarray:
    d = np.gradient(centre, axis=0)
    n = np.stack([-d[:, 1], d[:, 0]], axis=1)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    return centre + offset * n


def _road_centre(layout, speed, yaw_rate, n_steps, rng, p):
    """Road centre line (dense polyline) around the ego path."""
    back, ahead = MAX_RANGE + 20.0, MAX_RANGE + 20.0 + speed * STEP_SECONDS * n_steps
    s = np.arange(-back, ahead + 1e-9, 1.0)
    y0 = rng.uniform(-p.lateral_jitter, p.lateral_jitter)
    if layout == "arc" and abs(yaw_rate) > 1e-6:
        radius = speed / yaw_rate
        ang = s / radius
        return np.stack([radius * np.sin(ang), radius * (1 - np.cos(ang))], axis=1) \
            + np.array([0.0, y0])
    psi = rng.uniform(-p.heading_jitter, p.heading_jitter)
    return np.stack([s * math.cos(psi), y0 + s * math.sin(psi)], axis=1)


def _road_elements(centre, p, rng):
    elements = []
    offsets = (np.arange(p.n_lanes) - (p.n_lanes - 1) / 2.0) * p.lane_spacing
    for i, off in enumerate(offsets):
        cls = "boundary" if i in (0, len(offsets) - 1) else "divider"
        elements.append(Element(_offset_curve(centre, off), cls))
    if p.road and len(offsets) >= 2:
        left = _offset_curve(centre, offsets[-1])
        right = _offset_curve(centre, offsets[0])
        elements.insert(0, Element(np.concatenate([left, right[::-1]]), "road"))
    return elements


def gen_scene(seed: int, params: SceneParams = SceneParams()) -> SceneSpec:
    rng = np.random.default_rng(seed)
    layout = params.layout
    if layout == "random":
        layout = ("straight", "arc", "crossing")[rng.integers(3)]
    if layout not in ("straight", "arc", "crossing"):
        raise ValueError(f"unknown layout {layout!r}")
    speed = params.speed if params.speed is not None else float(rng.uniform(*params.speed_range))
    yaw_rate = 0.0
    if layout == "arc":
        yaw_rate = float(rng.uniform(0.3, 1.0) * params.max_yaw_rate * rng.choice([-1, 1]))
    traj = _trajectory(params.n_steps, speed, yaw_rate)
    centre = _road_centre(layout, speed, yaw_rate, params.n_steps, rng, params)
    elements = _road_elements(centre, params, rng)
    if layout == "crossing":
        xc = float(rng.uniform(5.0, 25.0))
        s = np.arange(-MAX_RANGE - 20, MAX_RANGE + 20 + 1e-9, 1.0)
        cross = np.stack([np.full_like(s, xc), s], axis=1)
        cross_p = replace(params, road=False, n_lanes=max(2, params.n_lanes // 2))
        elements += _road_elements(cross, cross_p, rng)
        for off in (-1.0, 1.0):
            xs = xc + off * (cross_p.n_lanes * cross_p.lane_spacing / 2 + 2.0)
            elements.append(Element(np.array([[xs, -6.0], [xs, 6.0]]), "ped_crossing"))
    occluders = [_front_occluder(traj[-1], params.n_steps - 1, rng, k)
                 for k in range(params.occluders)]
    return SceneSpec(seed, elements, traj, occluders, default_rig(params.image_size),
                     params.lane_half_width)


def _front_occluder(ego: Pose, step: int, rng, k: int) -> Occluder:
    """A tall box just ahead of (or beside) the final ego pose, active only then."""
    angle = 0.0 if k == 0 else rng.uniform(-math.pi, math.pi)
    dist = rng.uniform(3.0, 4.5)
    local = np.array([dist * math.cos(angle), dist * math.sin(angle), 0.0])
    c = ego.apply(local)
    return Occluder((float(c[0]), float(c[1]), 3.0), (3.0, 3.0, 6.0), frozenset({step}))


# rendering -------------------------------------------------------------------

@dataclass(frozen=True)
class RenderedFrame:
    images: np.ndarray  # (cameras, H, W, 3) in [0, 1]
    step: int


@dataclass
class _Texture:
    origin: np.ndarray
    res: float
    label: np.ndarray  # (rows along x, cols along y) color key index
    keys: tuple


def _build_texture(scene: SceneSpec) -> _Texture:
    xy = np.array([p.translation[:2] for p in scene.trajectory])
    margin = MAX_RANGE + 5.0
    lo = xy.min(0) - margin
    hi = xy.max(0) + margin
    res = TEXTURE_RES
    shape = tuple(np.ceil((hi - lo) / res).astype(int) + 1)
    keys = ("ground", "road") + LINE_CLASSES
    label = np.zeros(shape, dtype=np.int8)
    gx = lo[0] + (np.arange(shape[0]) + 0.5) * res
    gy = lo[1] + (np.arange(shape[1]) + 0.5) * res
    for e in scene.elements:
        if e.cls == "road":
            label[_polygon_mask(e.points, gx, gy)] = 1
    for cls in LINE_CLASSES:
        seeds = np.ones(shape, dtype=bool)
        for e in scene.elements:
            if e.cls != cls:
                continue
            pts = _densify(e.points, res / 2)
            idx = np.floor((pts - lo) / res).astype(int)
            ok = (idx >= 0).all(1) & (idx[:, 0] < shape[0]) & (idx[:, 1] < shape[1])
            seeds[idx[ok, 0], idx[ok, 1]] = False
        if seeds.all():
            continue
        dist = ndimage.distance_transform_edt(seeds) * res
        label[dist <= scene.lane_half_width] = keys.index(cls)
    return _Texture(lo, res, label, keys)


def _polygon_mask(poly, gx, gy):
    xx, yy = np.meshgrid(gx, gy, indexing="ij")
    inside = np.zeros(xx.shape, dtype=bool)
    for (ax, ay), (bx, by) in zip(poly, np.roll(poly, -1, axis=0)):
        crosses = (ay > yy) != (by > yy)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = ax + (yy - ay) * (bx - ax) / (by - ay)
        inside ^= crosses & (xx < x_at)
    return inside


def _densify(points, step):
    pts = np.asarray(points, dtype=np.float64)
    out = [pts[:1]]
    for a, b in zip(pts[:-1], pts[1:]):
        n = max(1, int(np.ceil(np.linalg.norm(b - a) / step)))
        t = (np.arange(1, n + 1) / n)[:, None]
        out.append(a + t * (b - a))
    return np.concatenate(out)


def _ray_box(origin, dirs, occ: Occluder):
    c = np.asarray(occ.center)
    half = np.asarray(occ.size) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (c - half - origin) / dirs
        t2 = (c + half - origin) / dirs
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (tmax >= np.maximum(tmin, 0.0))
    return np.where(hit, np.maximum(tmin, 0.0), np.inf)


def camera_rays(cam: Camera, ego: Pose):
    """World-frame origin and per-pixel ray directions (H*W, 3), row-major."""
    k = cam.intrinsics
    vv, uu = np.meshgrid(np.arange(k.height), np.arange(k.width), indexing="ij")
    rays = np.stack([(uu.ravel() - k.cx) / k.fx, (vv.ravel() - k.cy) / k.fy,
                     np.ones(uu.size)], axis=1)
    cam_world = ego.compose(cam.extrinsic)
    return cam_world.translation, rays @ cam_world.rotation.T


def render_frame(scene: SceneSpec, step: int) -> RenderedFrame:
    if scene._texture is None:
        scene._texture = _build_texture(scene)
    tex = scene._texture
    palette = np.array([COLORS[k] for k in tex.keys])
    ego = scene.trajectory[step]
    active = [o for o in scene.occluders if o.active(step)]
    images = []
    for cam in scene.rig:
        k = cam.intrinsics
        origin, dirs = camera_rays(cam, ego)
        img = np.tile(np.asarray(COLORS["sky"]), (dirs.shape[0], 1))
        with np.errstate(divide="ignore"):
            t_ground = np.where(dirs[:, 2] < 0, -origin[2] / dirs[:, 2], np.inf)
        hit = origin + np.where(np.isfinite(t_ground), t_ground, 0.0)[:, None] * dirs
        ground = np.isfinite(t_ground) & (np.hypot(hit[:, 0] - origin[0], hit[:, 1] - origin[1]) <= MAX_RANGE)
        idx = np.floor((hit[:, :2] - tex.origin) / tex.res).astype(np.int64)
        inside = ground & (idx >= 0).all(1) & (idx[:, 0] < tex.label.shape[0]) & (idx[:, 1] < tex.label.shape[1])
        keys = np.zeros(len(dirs), dtype=np.int64)
        keys[inside] = tex.label[idx[inside, 0], idx[inside, 1]]
        img[ground] = palette[keys[ground]]
        t_occ = np.full(len(dirs), np.inf)
        for occ in active:
            t_occ = np.minimum(t_occ, _ray_box(origin, dirs, occ))
        occluded = np.isfinite(t_occ) & (t_occ < np.where(ground, t_ground, np.inf))
        img[occluded] = COLORS["occluder"]
        images.append(img.reshape(k.height, k.width, 3))
    return RenderedFrame(np.stack(images), step)


# ground truth ----------------------------------------------------------------

def elements_in_ego(scene: SceneSpec, step: int):
    inv = scene.trajectory[step].inverse()
    out = []
    for e in scene.elements:
        pts = np.column_stack([e.points, np.zeros(len(e.points))])
        out.append((inv.apply(pts)[:, :2], e.cls))
    return out


def gt_raster(scene: SceneSpec, step: int, setting: EvalSetting) -> np.ndarray:
    return rasterize_map(elements_in_ego(scene, step), setting)


# warp-based reference and coverage -------------------------------------------

def grid_lookup(validity, spec: BevGridSpec) -> Callable:
    """Nearest-cell lookup into a past-frame validity grid, as a point predicate."""
    grid = np.asarray(validity, dtype=bool).reshape(spec.x_cells, spec.y_cells)
    dx, dy = spec.cell_size

    def lookup(points):
        pts = np.asarray(points)
        i = np.floor((pts[:, 0] - spec.x_range[0]) / dx).astype(np.int64)
        j = np.floor((pts[:, 1] - spec.y_range[0]) / dy).astype(np.int64)
        ok = (i >= 0) & (i < spec.x_cells) & (j >= 0) & (j < spec.y_cells)
        out = np.zeros(len(pts), dtype=bool)
        out[ok] = grid[i[ok], j[ok]]
        return out
    return lookup


def warp_reference(past_validity, past_ego: Pose, current_ego: Pose, bev_spec: BevGridSpec,
                   intermediate_egos: Sequence[Pose] = ()) -> np.ndarray:
    """Warp-based fusion footprint of one past step, on the current grid.

    A current cell is warp-valid iff its location, mapped into the past ego
    frame, lies inside the past BEV range and was camera-visible then.
    ``past_validity`` is either a past-frame validity grid (X, Y) or a
    predicate over past-frame points. Serial warping also requires the cell to
    stay inside the BEV range of every ``intermediate_egos`` frame.
    """
    if not callable(past_validity):
        past_validity = grid_lookup(past_validity, bev_spec)
    pts = bev_grid_points(bev_spec)
    nz = len(bev_spec.heights)
    to_past = past_ego.inverse().compose(current_ego)
    past_pts = to_past.apply(pts)
    ok = bev_spec.contains_xy(past_pts[:, :2])
    for ego in intermediate_egos:
        ok &= bev_spec.contains_xy(ego.inverse().compose(current_ego).apply(pts)[:, :2])
    seen = np.asarray(past_validity(past_pts), dtype=bool)
    cell_ok = ok.reshape(-1, nz).all(1)
    return (cell_ok & seen.reshape(-1, nz).any(1)).reshape(bev_spec.x_cells, bev_spec.y_cells)


def camera_visibility(rig: Sequence[Camera], num_levels: int = 4) -> Callable:
    """Predicate: is an ego-frame point sampled by any camera at any level."""
    from .features import STRIDES, bilinear_corners, pixel_to_cell
    ident = Pose.identity()

    def visible(points):
        out = np.zeros(len(points), dtype=bool)
        for cam in rig:
            view = compose_virtual_view(cam.extrinsic, cam.intrinsics, ident, ident)
            proj = project_points(view, points)
            k = cam.intrinsics
            for s in STRIDES[:num_levels]:
                cr = bilinear_corners(k.height // s, k.width // s,
                                      pixel_to_cell(proj.u, s), pixel_to_cell(proj.v, s))
                out |= proj.valid & cr.in_bounds
        return out
    return visible


def step_coverage(scene: SceneSpec, step: int, P: int, bev_spec: BevGridSpec):
    """Per past step p = 0..P: (unified (Nq,), warp (Nq,)) validity of the
    current cells, with ``step`` as the current frame."""
    poses = [scene.trajectory[step - p] for p in range(P + 1) if step - p >= 0]
    rigs = [scene.rig] * len(poses)
    valid = window_validity(poses, rigs, bev_spec)
    per_step = valid.reshape(bev_spec.num_queries, len(poses), -1).any(-1)
    unified, warp = [], []
    for p in range(len(poses)):
        unified.append(per_step[:, p])
        w = warp_reference(camera_visibility(scene.rig), poses[p], poses[0], bev_spec,
                           intermediate_egos=poses[1:p])
        warp.append(w.reshape(-1))
    return unified, warp


def coverage_analysis(scene: SceneSpec, P: int, bev_spec: BevGridSpec, step: int | None = None):
    """Fused (cell, step) pairs per fusion depth, in units of the grid area.

    Returns one row per depth 0..P with ``unified`` (pairs valid under the
    unified sampler) and ``warp`` (pairs surviving serial warping), each
    divided by the number of cells. Also reports ``unified_cells``, the
    fraction of cells with at least one valid entry.
    """
    step = len(scene.trajectory) - 1 if step is None else step
    unified, warp = step_coverage(scene, step, P, bev_spec)
    n = bev_spec.num_queries
    rows = []
    u_acc = w_acc = 0
    any_valid = np.zeros(n, dtype=bool)
    for depth in range(P + 1):
        if depth < len(unified):
            u_acc += int(unified[depth].sum())
            w_acc += int(warp[depth].sum())
            any_valid |= unified[depth]
        rows.append({"P": depth, "unified": u_acc / n, "warp": w_acc / n,
                     "unified_cells": float(any_valid.mean())})
    return rows


# datasets --------------------------------------------------------------------

def build_frame(scene: SceneSpec, step: int, setting: EvalSetting, history: int,
                frame_id: str = "", renders: dict | None = None):
    """Training sample for ``step`` with up to ``history`` past steps, newest first."""
    from .training import Frame
    renders = {} if renders is None else renders
    steps = [s for s in range(step, step - history - 1, -1) if s >= 0]
    images = []
    for s in steps:
        if s not in renders:
            renders[s] = render_frame(scene, s).images
        images.append(renders[s])
    return Frame(images, [scene.trajectory[s] for s in steps], [scene.rig] * len(steps),
                 gt_raster(scene, step, setting), setting.bev_grid(),
                 frame_id or f"scene{scene.seed}_step{step}")


def occlusion_params(**overrides) -> SceneParams:
    """Straight road, one wall ahead of the ego at the final step only."""
    base = dict(n_steps=11, layout="straight", occluders=1, speed_range=(6.0, 9.0))
    base.update(overrides)
    return SceneParams(**base)


def make_dataset(seeds: Sequence[int], setting: EvalSetting, params: SceneParams,
                 history: int = 10, steps: Sequence[int] | None = None):
    """One frame per scene at the final step (or each of ``steps``)."""
    frames = []
    for seed in seeds:
        scene = gen_scene(int(seed), params)
        renders: dict = {}
        for step in (steps if steps is not None else [len(scene.trajectory) - 1]):
            frames.append(build_frame(scene, step, setting, history, renders=renders))
    return frames

"""Rigid poses, virtual views, pinhole projection and the BEV query grid.

Pose convention: a ``Pose`` maps points of the owning frame into its parent,
``p_parent = R @ p_own + t``. Camera extrinsics are camera->ego and ego poses
are ego->world. Under this convention a virtual view is the chain
current ego -> world -> past ego -> camera, which is what
:func:`compose_virtual_view` builds.

Camera frames use the usual optical convention (x right, y down, z forward);
ego frames are x forward, y left, z up.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DEPTH_EPSILON = 1e-6
_ORTHO_TOL = 1e-6


def orthonormalize(matrix) -> np.ndarray:
    """Return the closest rotation to ``matrix`` (symmetric orthogonalization).

    Matrices further than 1e-6 from orthonormal, or with negative determinant,
    are rejected.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        raise ValueError("rotation must be a finite 3x3 matrix")
    if np.abs(m.T @ m - np.eye(3)).max() > _ORTHO_TOL:
        raise ValueError("matrix is not orthonormal within 1e-6")
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        raise ValueError("rotation must be right-handed")
    return r


def rotation_from_ypr(yaw: float, pitch: float = 0.0, roll: float = 0.0) -> np.ndarray:
    """Rz(yaw) @ Ry(pitch) @ Rx(roll), angles in radians."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    return orthonormalize(rz @ ry @ rx)


def camera_rotation(yaw: float, pitch_down: float = 0.0) -> np.ndarray:
    """Camera->ego rotation for an optical camera looking along ``yaw``.

    ``pitch_down`` tilts the optical axis towards the ground (radians).
    """
    # optical axes expressed in a level ego-aligned frame looking along +x
    base = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    return orthonormalize(rotation_from_ypr(yaw, pitch_down) @ base)


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", orthonormalize(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise ValueError("translation must be a finite 3-vector")
        object.__setattr__(self, "translation", t)
        self.rotation.setflags(write=False)
        self.translation.setflags(write=False)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(rotation_from_ypr(yaw), translation)

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def to_json(self) -> dict:
        return {"rotation": self.rotation.reshape(-1).tolist(),
                "translation": self.translation.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Pose":
        return cls(np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
                   d["translation"])


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_degrees: float) -> "Intrinsics":
        """Square-pixel camera with horizontal field of view ``fov_degrees``."""
        f = focal_from_fov(width, fov_degrees)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def to_json(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_json(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class Camera:
    id: str
    intrinsics: Intrinsics
    extrinsic: Pose  # camera -> ego

    def to_json(self) -> dict:
        return {"id": self.id, "intrinsics": self.intrinsics.to_json(),
                "extrinsic": self.extrinsic.to_json()}

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        return cls(str(d["id"]), Intrinsics.from_json(d["intrinsics"]),
                   Pose.from_json(d["extrinsic"]))


@dataclass(frozen=True)
class VirtualView:
    rotation_v: np.ndarray
    translation_v: np.ndarray
    intrinsics: Intrinsics
    source_step: int = 0
    camera_id: str = ""


@dataclass(frozen=True)
class BevGridSpec:
    x_cells: int
    y_cells: int
    x_range: tuple[float, float]
    y_range: tuple[float, float]
    heights: tuple[float, ...] = (-3.0, -1.0, 1.0, 3.0)
    upsample_factor: int = 1

    def __post_init__(self):
        if self.x_cells < 1 or self.y_cells < 1 or self.upsample_factor < 1:
            raise ValueError("grid sizes and upsample factor must be positive")
        if not (self.x_range[0] < self.x_range[1] and self.y_range[0] < self.y_range[1]):
            raise ValueError("ranges must be (min, max) with min < max")
        h = tuple(float(v) for v in self.heights)
        if len(h) == 0 or any(b <= a for a, b in zip(h, h[1:])):
            raise ValueError("heights must be non-empty and strictly increasing")
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "x_range", tuple(map(float, self.x_range)))
        object.__setattr__(self, "y_range", tuple(map(float, self.y_range)))

    @property
    def cell_size(self) -> tuple[float, float]:
        return ((self.x_range[1] - self.x_range[0]) / self.x_cells,
                (self.y_range[1] - self.y_range[0]) / self.y_cells)

    @property
    def num_queries(self) -> int:
        return self.x_cells * self.y_cells

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        dx, dy = self.cell_size
        xs = self.x_range[0] + (np.arange(self.x_cells) + 0.5) * dx
        ys = self.y_range[0] + (np.arange(self.y_cells) + 0.5) * dy
        return xs, ys

    def contains_xy(self, xy) -> np.ndarray:
        xy = np.asarray(xy)
        return ((xy[..., 0] >= self.x_range[0]) & (xy[..., 0] < self.x_range[1])
                & (xy[..., 1] >= self.y_range[0]) & (xy[..., 1] < self.y_range[1]))


def default_heights(low: float = -5.0, high: float = 3.0, stride: float = 2.0) -> tuple[float, ...]:
    """Heights in the half-open interval (low, high] stepping down from ``high``."""
    out = []
    z = high
    while z > low + 1e-9:
        out.append(z)
        z -= stride
    return tuple(sorted(out))


def compose_virtual_view(cam: Pose, cam_intrinsics: Intrinsics, past_ego: Pose,
                         current_ego: Pose, source_step: int = 0,
                         camera_id: str = "") -> VirtualView:
    """Re-express a (possibly past) camera relative to the current ego frame."""
    ri_inv = cam.rotation.T
    rp_inv = past_ego.rotation.T
    a = ri_inv @ rp_inv
    rot = a @ current_ego.rotation
    trans = a @ current_ego.translation - a @ past_ego.translation - ri_inv @ cam.translation
    rot.setflags(write=False)
    trans.setflags(write=False)
    return VirtualView(rot, trans, cam_intrinsics, source_step, camera_id)


@dataclass(frozen=True)
class Projection:
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    valid: np.ndarray

    def __len__(self):
        return len(self.u)

    def __getitem__(self, i):
        return (float(self.u[i]), float(self.v[i]), float(self.depth[i]), bool(self.valid[i]))


def project_points(view: VirtualView, points_bev, depth_epsilon: float = DEPTH_EPSILON) -> Projection:
    pts = np.asarray(points_bev, dtype=np.float64).reshape(-1, 3)
    cam = pts @ view.rotation_v.T + view.translation_v
    depth = cam[:, 2]
    k = view.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * cam[:, 0] / depth + k.cx
        v = k.fy * cam[:, 1] / depth + k.cy
    valid = ((depth > depth_epsilon) & (u >= 0) & (u < k.width)
             & (v >= 0) & (v < k.height))
    return Projection(u, v, depth, valid)


def bev_grid_points(spec: BevGridSpec) -> np.ndarray:
    """Cell-center sample points, x-major then y then height; shape (X*Y*Z, 3)."""
    xs, ys = spec.cell_centers()
    zs = np.asarray(spec.heights)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def focal_from_fov(resolution_pixels: int, fov_degrees: float) -> float:
    if not 0.0 < fov_degrees < 180.0:
        raise ValueError(f"field of view must lie in (0, 180) degrees, got {fov_degrees}")
    return (resolution_pixels / 2.0) / math.tan(math.radians(fov_degrees) / 2.0)


def visible_limit(focal_pixels: float, n_pixel: int, lane_width_m: float) -> float:
    """Farthest distance at which a lane still spans ``n_pixel`` image pixels."""
    if n_pixel < 1 or lane_width_m <= 0:
        raise ValueError("n_pixel must be >= 1 and lane width positive")
    return focal_pixels / n_pixel * lane_width_m


# manifest --------------------------------------------------------------------

@dataclass
class RigManifest:
    cameras: list[Camera]
    trajectory: list[Pose] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"cameras": [c.to_json() for c in self.cameras],
                "trajectory": [dict(step=i, **p.to_json()) for i, p in enumerate(self.trajectory)]}

    @classmethod
    def from_json(cls, d: dict) -> "RigManifest":
        traj = sorted(d.get("trajectory", []), key=lambda e: e["step"])
        return cls([Camera.from_json(c) for c in d["cameras"]],
                   [Pose.from_json(e) for e in traj])


def save_manifest(manifest: RigManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=2))


def load_manifest(path) -> RigManifest:
    return RigManifest.from_json(json.loads(Path(path).read_text()))


def views_for_step(cameras: Sequence[Camera], past_ego: Pose, current_ego: Pose,
                   source_step: int) -> list[VirtualView]:
    return [compose_virtual_view(c.extrinsic, c.intrinsics, past_ego, current_ego,
                                 source_step, c.id) for c in cameras]

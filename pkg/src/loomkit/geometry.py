"""Pinhole projection, radial-tangential distortion, rigid transforms,
rotation-only cross-camera remapping, and bilinear grid sampling.

All operations are pure; types are immutable and safe to share.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import BehindCamera, InputError, NoConvergence

ORTHONORMAL_TOL = 1e-9
UNDISTORT_TOL = 1e-8
UNDISTORT_RESIDUAL_LIMIT = 1e-6
UNDISTORT_MAX_ITER = 20
OUT_OF_VIEW = -1.0e6  # sentinel pixel coordinate, far outside any image


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole parameters with radial-tangential distortion (k1,k2,p1,p2,k3)."""

    fx: float
    fy: float
    cx: float
    cy: float
    dist: tuple[float, float, float, float, float] = (0.0, 0.0, 0.0, 0.0, 0.0)
    size: tuple[int, int] | None = None  # (width, height), optional

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        object.__setattr__(self, "dist", tuple(float(d) for d in self.dist))

    @property
    def has_distortion(self) -> bool:
        return any(abs(d) > 0 for d in self.dist)


@dataclass(frozen=True)
class RigidTransform:
    """Rotation + translation; apply() maps points of the source frame
    into the destination frame: p_dst = R @ p_src + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=ORTHONORMAL_TOL, rtol=0):
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation determinant must be +1 within 1e-9")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_flat(cls, rotation9: Sequence[float], translation3: Sequence[float]):
        return cls(np.asarray(rotation9, dtype=np.float64).reshape(3, 3),
                   np.asarray(translation3, dtype=np.float64))

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        """Composition: (a @ b).apply(x) == a.apply(b.apply(x))."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)


@dataclass(frozen=True)
class Grid2D:
    """Dense (height, width, channels) feature grid with a constant
    out-of-range fill value."""

    values: np.ndarray
    fill: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3:
            raise ValueError("grid values must be (H, W) or (H, W, C)")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


# ---------------------------------------------------------------------------
# distortion


def distort(intr: Intrinsics, xy: np.ndarray) -> np.ndarray:
    """Apply the radial-tangential model to normalized coordinates (..., 2)."""
    xy = np.asarray(xy, dtype=np.float64)
    x, y = xy[..., 0], xy[..., 1]
    k1, k2, p1, p2, k3 = intr.dist
    r2 = x * x + y * y
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    return np.stack([xd, yd], axis=-1)


def _undistort_iterate(intr: Intrinsics, xy_dist: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-point inversion of distort(); returns (estimate, residual)."""
    xy_dist = np.asarray(xy_dist, dtype=np.float64)
    if not intr.has_distortion:
        return xy_dist.copy(), np.zeros(xy_dist.shape[:-1])
    k1, k2, p1, p2, k3 = intr.dist
    xd, yd = xy_dist[..., 0], xy_dist[..., 1]
    x, y = xd.copy(), yd.copy()
    for _ in range(UNDISTORT_MAX_ITER):
        r2 = x * x + y * y
        radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
        x_new = (xd - (2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x))) / radial
        y_new = (yd - (p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y)) / radial
        step = max(np.abs(x_new - x).max(initial=0.0), np.abs(y_new - y).max(initial=0.0))
        x, y = x_new, y_new
        if step < UNDISTORT_TOL:
            break
    est = np.stack([x, y], axis=-1)
    residual = np.abs(distort(intr, est) - xy_dist).max(axis=-1)
    return est, residual


def undistort(intr: Intrinsics, xy_dist: np.ndarray) -> np.ndarray:
    """Invert the distortion model; raises NoConvergence past the residual cap."""
    est, residual = _undistort_iterate(intr, xy_dist)
    worst = float(residual.max(initial=0.0))
    if worst > UNDISTORT_RESIDUAL_LIMIT:
        raise NoConvergence(f"undistortion residual {worst:.3e} > {UNDISTORT_RESIDUAL_LIMIT}")
    return est


# ---------------------------------------------------------------------------
# projection


def project_point(intr: Intrinsics, point, apply_distortion: bool = False) -> tuple[float, float]:
    """Project one 3D camera-frame point to pixel coordinates."""
    x, y, z = (float(v) for v in point)
    if z <= 0:
        raise BehindCamera(f"point depth {z} <= 0")
    xn, yn = x / z, y / z
    if apply_distortion and intr.has_distortion:
        xn, yn = distort(intr, np.array([xn, yn]))
    return (intr.fx * xn + intr.cx, intr.fy * yn + intr.cy)


def project_points(intr: Intrinsics, points: np.ndarray,
                   apply_distortion: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of (..., 3) points.

    Returns (uv array, valid mask); entries with z <= 0 are marked invalid
    and set to the OUT_OF_VIEW sentinel instead of raising.
    """
    p = np.asarray(points, dtype=np.float64)
    z = p[..., 2]
    valid = z > 0
    zs = np.where(valid, z, 1.0)
    xn = p[..., 0] / zs
    yn = p[..., 1] / zs
    if apply_distortion and intr.has_distortion:
        d = distort(intr, np.stack([xn, yn], axis=-1))
        xn, yn = d[..., 0], d[..., 1]
    uv = np.stack([intr.fx * xn + intr.cx, intr.fy * yn + intr.cy], axis=-1)
    uv[~valid] = OUT_OF_VIEW
    return uv, valid


# ---------------------------------------------------------------------------
# bilinear sampling


def bilinear_sample(grid: Grid2D, uv) -> np.ndarray:
    """Sample one (u, v) location; outside [0, w-1] x [0, h-1] returns fill."""
    out = bilinear_sample_many(grid, np.asarray(uv, dtype=np.float64).reshape(1, 2))
    return out[0]


def bilinear_sample_many(grid: Grid2D, uvs: np.ndarray) -> np.ndarray:
    """Vectorized bilinear sampling of (..., 2) pixel coordinates."""
    uvs = np.asarray(uvs, dtype=np.float64)
    u, v = uvs[..., 0], uvs[..., 1]
    h, w = grid.height, grid.width
    inside = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1) & np.isfinite(u) & np.isfinite(v)
    uc = np.where(inside, u, 0.0)
    vc = np.where(inside, v, 0.0)
    x0 = np.floor(uc).astype(np.int64)
    y0 = np.floor(vc).astype(np.int64)
    x0 = np.minimum(x0, w - 2) if w > 1 else np.zeros_like(x0)
    y0 = np.minimum(y0, h - 2) if h > 1 else np.zeros_like(y0)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fu = (uc - x0)[..., None]
    fv = (vc - y0)[..., None]
    vals = grid.values
    blend = (
        vals[y0, x0] * (1.0 - fu) * (1.0 - fv)
        + vals[y0, x1] * fu * (1.0 - fv)
        + vals[y1, x0] * (1.0 - fu) * fv
        + vals[y1, x1] * fu * fv
    )
    blend[~inside] = grid.fill
    return blend


def nearest_sample_many(grid: Grid2D, uvs: np.ndarray) -> np.ndarray:
    """Nearest-neighbor counterpart of bilinear_sample_many."""
    uvs = np.asarray(uvs, dtype=np.float64)
    u, v = uvs[..., 0], uvs[..., 1]
    h, w = grid.height, grid.width
    inside = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1) & np.isfinite(u) & np.isfinite(v)
    xi = np.rint(np.where(inside, u, 0.0)).astype(np.int64)
    yi = np.rint(np.where(inside, v, 0.0)).astype(np.int64)
    out = grid.values[yi, xi].copy()
    out[~inside] = grid.fill
    return out


# ---------------------------------------------------------------------------
# rotation-only cross-camera mapping


def infinite_depth_map(src_intr: Intrinsics, dst_intr: Intrinsics,
                       rotation: np.ndarray,
                       dst_size: tuple[int, int] | None = None) -> np.ndarray:
    """Dense destination-to-source pixel map assuming scene depth >> baseline.

    ``rotation`` maps source-camera rays into the destination camera
    (ray_dst = R @ ray_src); translation is deliberately ignored. For each
    destination pixel: undistort under the destination model, rotate the
    ray by R^T, re-distort and project under the source model. Rays that
    leave the source frustum get the OUT_OF_VIEW sentinel.

    Returns an (H, W, 2) float array of source (u, v) per destination pixel.
    """
    r = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
    if not np.allclose(r.T @ r, np.eye(3), atol=1e-8, rtol=0):
        raise ValueError("rotation must be orthonormal")
    size = dst_size or dst_intr.size
    if size is None:
        raise ValueError("destination size unknown; pass dst_size or set Intrinsics.size")
    w, h = size
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    xn = (uu - dst_intr.cx) / dst_intr.fx
    yn = (vv - dst_intr.cy) / dst_intr.fy
    norm, _residual = _undistort_iterate(dst_intr, np.stack([xn, yn], axis=-1))
    rays = np.concatenate([norm, np.ones_like(norm[..., :1])], axis=-1)
    rays_src = rays @ r  # (R^T @ ray) written row-wise
    z = rays_src[..., 2]
    ok = z > 1e-12
    zs = np.where(ok, z, 1.0)
    src_norm = np.stack([rays_src[..., 0] / zs, rays_src[..., 1] / zs], axis=-1)
    if src_intr.has_distortion:
        src_norm = distort(src_intr, src_norm)
    out = np.stack(
        [src_intr.fx * src_norm[..., 0] + src_intr.cx,
         src_intr.fy * src_norm[..., 1] + src_intr.cy],
        axis=-1,
    )
    out[~ok] = OUT_OF_VIEW
    return out


def remap_image(src: Grid2D, pixel_map: np.ndarray, mode: str = "bilinear") -> Grid2D:
    """Pull a destination image from ``src`` through a dst->src pixel map."""
    if mode == "bilinear":
        out = bilinear_sample_many(src, pixel_map)
    elif mode == "nearest":
        out = nearest_sample_many(src, pixel_map)
    else:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    return Grid2D(out, fill=src.fill)


# ---------------------------------------------------------------------------
# calibration files


@dataclass
class CalibrationSet:
    """Per-camera intrinsics plus pairwise extrinsics keyed "src_to_dst"."""

    cameras: dict = field(default_factory=dict)
    extrinsics: dict = field(default_factory=dict)

    def transform(self, src: str, dst: str) -> RigidTransform:
        key = f"{src}_to_{dst}"
        if key in self.extrinsics:
            return self.extrinsics[key]
        back = f"{dst}_to_{src}"
        if back in self.extrinsics:
            return self.extrinsics[back].inverse()
        raise InputError(f"no extrinsic {key} in calibration")


def load_calibration(path) -> CalibrationSet:
    with open(path) as f:
        doc = json.load(f)
    calib = CalibrationSet()
    for name, c in doc.get("cameras", {}).items():
        calib.cameras[name] = Intrinsics(
            fx=float(c["fx"]), fy=float(c["fy"]),
            cx=float(c["cx"]), cy=float(c["cy"]),
            dist=tuple(c.get("dist", (0.0,) * 5)),
            size=tuple(c["size"]) if "size" in c else None,
        )
    for key, e in doc.get("extrinsics", {}).items():
        calib.extrinsics[key] = RigidTransform.from_flat(e["rotation"], e["translation"])
    return calib


def save_calibration(calib: CalibrationSet, path) -> None:
    doc = {"cameras": {}, "extrinsics": {}}
    for name, c in calib.cameras.items():
        entry = {"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy, "dist": list(c.dist)}
        if c.size is not None:
            entry["size"] = list(c.size)
        doc["cameras"][name] = entry
    for key, e in calib.extrinsics.items():
        doc["extrinsics"][key] = {
            "rotation": [float(v) for v in e.rotation.reshape(-1)],
            "translation": [float(v) for v in e.translation],
        }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)

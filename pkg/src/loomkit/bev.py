"""Bird's-eye-view geometry: voxel-grid sampling, front-view feature
gathering, height reduction, and ego-motion BEV warping.

The voxel lattice follows the 1-based convention
v[i,j,k] = (X_start + (i-1) dx, Y_start + (j-1) dy, Z_start + (k-1) dz);
arrays returned here index the same centers 0-based. The ego frame is
x forward, y left, z up.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Grid2D, Intrinsics, RigidTransform, bilinear_sample_many

GRID_SNAP = 1e-7  # cells; guards bilinear jitter when warps hit exact centers


@dataclass(frozen=True)
class VoxelGridConfig:
    x_start: float
    y_start: float
    z_start: float
    delta: float  # voxel edge, identical along x, y, z
    nx: int
    ny: int
    nz: int

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("voxel edge must be positive")
        if min(self.nx, self.ny, self.nz) < 1:
            raise ValueError("voxel counts must be >= 1")


@dataclass(frozen=True)
class BevFeatureMap:
    """Nx x Ny grid of feature vectors anchored to an ego pose."""

    values: np.ndarray            # (nx, ny, C)
    pose: RigidTransform          # ego -> world at ``t_us``
    t_us: int
    cfg: VoxelGridConfig

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.shape[0] != self.cfg.nx or v.shape[1] != self.cfg.ny:
            raise ValueError("feature map shape disagrees with the grid config")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature values must be finite")
        object.__setattr__(self, "values", v)


def voxel_centers(cfg: VoxelGridConfig) -> np.ndarray:
    """All voxel centers as an (nx, ny, nz, 3) array in the ego frame."""
    xs = cfg.x_start + cfg.delta * np.arange(cfg.nx, dtype=np.float64)
    ys = cfg.y_start + cfg.delta * np.arange(cfg.ny, dtype=np.float64)
    zs = cfg.z_start + cfg.delta * np.arange(cfg.nz, dtype=np.float64)
    out = np.empty((cfg.nx, cfg.ny, cfg.nz, 3), dtype=np.float64)
    out[..., 0] = xs[:, None, None]
    out[..., 1] = ys[None, :, None]
    out[..., 2] = zs[None, None, :]
    return out


def gather_features(fv_map: Grid2D, cfg: VoxelGridConfig, intr: Intrinsics,
                    cam_from_ego: RigidTransform) -> np.ndarray:
    """Fill each voxel with the bilinearly sampled front-view feature at
    its projection; voxels behind the camera or off-image get zeros.

    Returns an (nx, ny, nz, C) volume.
    """
    centers = voxel_centers(cfg)
    r, t = cam_from_ego.rotation, cam_from_ego.translation
    x, y, z = centers[..., 0], centers[..., 1], centers[..., 2]
    # explicit component form keeps the arithmetic identical to a scalar loop
    px = r[0, 0] * x + r[0, 1] * y + r[0, 2] * z + t[0]
    py = r[1, 0] * x + r[1, 1] * y + r[1, 2] * z + t[1]
    pz = r[2, 0] * x + r[2, 1] * y + r[2, 2] * z + t[2]
    in_front = pz > 0
    zsafe = np.where(in_front, pz, 1.0)
    u = intr.fx * (px / zsafe) + intr.cx
    v = intr.fy * (py / zsafe) + intr.cy
    feats = bilinear_sample_many(fv_map, np.stack([u, v], axis=-1))
    feats[~in_front] = 0.0
    return feats


def reduce_height(volume: np.ndarray) -> np.ndarray:
    """Mean over the height axis: (nx, ny, nz, C) -> (nx, ny, C)."""
    volume = np.asarray(volume, dtype=np.float64)
    if volume.ndim != 4:
        raise ValueError("expected an (nx, ny, nz, C) volume")
    return volume.mean(axis=2)


def warp_bev(prev: BevFeatureMap, cur_pose: RigidTransform, t_us: int | None = None) -> BevFeatureMap:
    """Resample a history BEV map into the current ego frame.

    Each current cell center (on the z = 0 BEV plane) is carried through
    world coordinates into the previous ego frame, dropped onto the BEV
    plane, and sampled bilinearly from ``prev``; out-of-grid cells are 0.
    Coordinates within GRID_SNAP of an exact cell center are snapped so
    an identity warp reproduces the input bit-for-bit.
    """
    cfg = prev.cfg
    rel = prev.pose.inverse() @ cur_pose  # current ego -> previous ego
    xs = cfg.x_start + cfg.delta * np.arange(cfg.nx, dtype=np.float64)
    ys = cfg.y_start + cfg.delta * np.arange(cfg.ny, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx, gy, np.zeros_like(gx)], axis=-1)
    prev_pts = rel.apply(pts.reshape(-1, 3)).reshape(cfg.nx, cfg.ny, 3)
    ci = (prev_pts[..., 0] - cfg.x_start) / cfg.delta
    cj = (prev_pts[..., 1] - cfg.y_start) / cfg.delta
    for c in (ci, cj):
        near = np.abs(c - np.rint(c)) < GRID_SNAP
        c[near] = np.rint(c[near])
    # values are (nx, ny, C); treat j as the u axis and i as the v axis
    grid = Grid2D(prev.values.transpose(1, 0, 2), fill=0.0)
    out = bilinear_sample_many(grid, np.stack([cj, ci], axis=-1))
    return BevFeatureMap(out, cur_pose, prev.t_us if t_us is None else t_us, cfg)


# ---------------------------------------------------------------------------
# flat tensor serialization (f32 + JSON sidecar)


def save_tensor(arr: np.ndarray, path) -> None:
    path = Path(path)
    data = np.ascontiguousarray(arr, dtype=np.float32)
    path.write_bytes(data.tobytes())
    sidecar = {"shape": list(data.shape), "dtype": "f32", "layout": "row-major"}
    Path(str(path) + ".json").write_text(json.dumps(sidecar))


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    if sidecar.get("dtype") != "f32" or sidecar.get("layout") != "row-major":
        raise ValueError(f"unsupported tensor encoding in {path}.json")
    flat = np.frombuffer(path.read_bytes(), dtype=np.float32)
    return flat.reshape(sidecar["shape"]).copy()

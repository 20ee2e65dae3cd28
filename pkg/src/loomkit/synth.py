"""Analytic looming-scene generator: frames, events, box trajectories and
exact TTC ground truth for a fronto-parallel rectangle approaching (or
receding from) a static camera.

Geometry is closed-form: with front-face depth Z(t) = Z0 - v*t,
tau(t) = Z(t) / v and the projected height is fy * H / Z(t) exactly.
Events fire wherever per-pixel log intensity crosses multiples of the
contrast threshold between micro-steps (20 per frame interval), with
timestamps linearly interpolated inside the step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DegenerateSpec
from .events import EventStream
from .geometry import Intrinsics, RigidTransform
from .tracking import Box3D

MICROSTEPS_PER_FRAME = 20
BOX_THICKNESS = 0.2  # m; synthetic boxes are thin slabs behind the front face


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of one synthetic looming scene."""

    intrinsics: Intrinsics
    object_width: float          # m
    object_height: float         # m
    initial_depth: float         # m, front face at t = 0
    speed: float                 # m/s, positive = approaching
    duration: float              # s
    frame_rate: float = 10.0     # Hz
    contrast: float = 0.9        # log-intensity step of the object
    threshold: float = 0.18      # event contrast threshold C
    lateral_offset: float = 0.0  # m, along camera x
    noise_rate: float = 0.0      # uniform noise events / pixel / s
    jitter_px: float = 0.0       # sigma of event coordinate jitter
    name: str = "scene"

    def __post_init__(self):
        if self.initial_depth <= 0:
            raise ValueError("initial depth must be positive")
        if self.speed > 0 and self.duration * self.speed >= self.initial_depth:
            raise ValueError("object would cross the image plane within the duration")
        if self.intrinsics.size is None:
            raise ValueError("scene intrinsics need an image size")
        if self.object_width <= 0 or self.object_height <= 0:
            raise ValueError("object dimensions must be positive")
        if self.threshold <= 0 or self.duration <= 0 or self.frame_rate <= 0:
            raise ValueError("threshold, duration and frame rate must be positive")

    def depth(self, t: float) -> float:
        return self.initial_depth - self.speed * t


def analytic_ttc(spec: SceneSpec, t: float) -> float:
    """Exact TTC of the front face at time t: (Z0 - v t) / v."""
    if not 0.0 <= t <= spec.duration:
        raise ValueError("t outside the scene duration")
    return spec.depth(t) / spec.speed


def analytic_height(spec: SceneSpec, t: float) -> float:
    """Exact projected height in pixels at time t: fy * H / Z(t)."""
    if not 0.0 <= t <= spec.duration:
        raise ValueError("t outside the scene duration")
    return spec.intrinsics.fy * spec.object_height / spec.depth(t)


@dataclass
class SynthBundle:
    """Everything one scene produces: events, frames, boxes, ground truth."""

    spec: SceneSpec
    stream: EventStream
    frames: np.ndarray            # (F, H, W) float32 in [0, 1]
    frame_t_us: np.ndarray        # (F,)
    boxes: list                   # Box3D per frame, world frame, ego at origin
    ego_poses: dict               # t_us -> RigidTransform (identity; static camera)
    taus: np.ndarray              # analytic tau per frame
    heights_px: np.ndarray        # analytic projected height per frame


def projected_extent(spec: SceneSpec, t: float) -> tuple[float, float, float, float]:
    """Projected rectangle extent (u_lo, u_hi, v_lo, v_hi) at time t."""
    z = spec.depth(t)
    intr = spec.intrinsics
    uc = intr.fx * spec.lateral_offset / z + intr.cx
    du = intr.fx * (spec.object_width / 2.0) / z
    vc = intr.cy
    dv = intr.fy * (spec.object_height / 2.0) / z
    return uc - du, uc + du, vc - dv, vc + dv


def _coverage_1d(length: int, lo: float, hi: float) -> np.ndarray:
    """Per-pixel overlap of [lo, hi] with unit pixels centered on integers."""
    centers = np.arange(length, dtype=np.float64)
    return np.clip(np.minimum(centers + 0.5, hi) - np.maximum(centers - 0.5, lo), 0.0, 1.0)


def render_log_image(spec: SceneSpec, t: float) -> np.ndarray:
    """Log intensity relative to background; edges anti-aliased over 1 px."""
    w, h = spec.intrinsics.size
    u_lo, u_hi, v_lo, v_hi = projected_extent(spec, t)
    return spec.contrast * np.outer(_coverage_1d(h, v_lo, v_hi), _coverage_1d(w, u_lo, u_hi))


def render_frame(spec: SceneSpec, t: float) -> np.ndarray:
    """Linear-intensity frame normalized into [0, 1]."""
    log_img = render_log_image(spec, t)
    img = 0.5 * np.exp(log_img)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _emit_events(spec: SceneSpec, rng: np.random.Generator):
    """Threshold-crossing events over the scene duration."""
    w, h = spec.intrinsics.size
    n_steps = int(round(spec.duration * spec.frame_rate * MICROSTEPS_PER_FRAME))
    dt_step = spec.duration / n_steps
    ref = render_log_image(spec, 0.0)
    xs, ys, ts, ps = [], [], [], []
    c = spec.threshold
    for step in range(1, n_steps + 1):
        t_now = step * dt_step
        cur = render_log_image(spec, t_now)
        diff = cur - ref
        n_cross = np.floor(np.abs(diff) / c).astype(np.int64)
        yy, xx = np.nonzero(n_cross)
        if yy.size:
            counts = n_cross[yy, xx]
            mag = np.abs(diff[yy, xx])
            sign = np.sign(diff[yy, xx])
            total = int(counts.sum())
            rep_x = np.repeat(xx, counts)
            rep_y = np.repeat(yy, counts)
            rep_sign = np.repeat(sign, counts)
            # crossing ordinal within each pixel: 1..k
            ordinal = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts) + 1
            frac = ordinal * c / np.repeat(mag, counts)
            t_event = (t_now - dt_step) + frac * dt_step
            xs.append(rep_x)
            ys.append(rep_y)
            ts.append(np.round(t_event * 1e6).astype(np.int64))
            ps.append(rep_sign.astype(np.int8))
            ref[yy, xx] += sign * counts * c
    if xs:
        xs = np.concatenate(xs)
        ys = np.concatenate(ys)
        ts = np.concatenate(ts)
        ps = np.concatenate(ps)
    else:
        xs = np.empty(0, np.int64)
        ys = np.empty(0, np.int64)
        ts = np.empty(0, np.int64)
        ps = np.empty(0, np.int8)
    if spec.jitter_px > 0 and xs.size:
        xs = np.clip(np.round(xs + rng.normal(0, spec.jitter_px, xs.size)), 0, w - 1)
        ys = np.clip(np.round(ys + rng.normal(0, spec.jitter_px, ys.size)), 0, h - 1)
    return xs.astype(np.int32), ys.astype(np.int32), ts, ps


def _noise_events(spec: SceneSpec, rng: np.random.Generator):
    w, h = spec.intrinsics.size
    expected = spec.noise_rate * w * h * spec.duration
    n = int(rng.poisson(expected)) if expected > 0 else 0
    xs = rng.integers(0, w, n).astype(np.int32)
    ys = rng.integers(0, h, n).astype(np.int32)
    ts = np.round(np.sort(rng.uniform(0, spec.duration, n)) * 1e6).astype(np.int64)
    ps = np.where(rng.random(n) < 0.5, -1, 1).astype(np.int8)
    return xs, ys, ts, ps


def generate(spec: SceneSpec, seed: int = 0) -> SynthBundle:
    """Render a full scene bundle, deterministic in (spec, seed)."""
    w, h = spec.intrinsics.size
    visible = False
    for t in np.linspace(0.0, spec.duration, 7):
        u_lo, u_hi, v_lo, v_hi = projected_extent(spec, float(t))
        if u_hi > 0 and u_lo < w and v_hi > 0 and v_lo < h:
            visible = True
            break
    if not visible:
        raise DegenerateSpec("object never intersects the image")

    rng = np.random.default_rng(seed)
    xs, ys, ts, ps = _emit_events(spec, rng)
    nx, ny, nt, npol = _noise_events(spec, rng)
    if nx.size:
        xs = np.concatenate([xs, nx])
        ys = np.concatenate([ys, ny])
        ts = np.concatenate([ts, nt])
        ps = np.concatenate([ps, npol])
    # emission is pixel-major inside each micro-step; restore time order
    order = np.argsort(ts, kind="stable")
    xs, ys, ts, ps = xs[order], ys[order], ts[order], ps[order]

    n_frames = int(math.floor(spec.duration * spec.frame_rate)) + 1
    frame_t = np.arange(n_frames) / spec.frame_rate
    frame_t_us = np.round(frame_t * 1e6).astype(np.int64)
    frames = np.stack([render_frame(spec, float(t)) for t in frame_t])

    stream = EventStream.from_arrays((w, h), xs, ys, ts, ps, frame_t_us)

    boxes = []
    for t, t_us in zip(frame_t, frame_t_us):
        z = spec.depth(float(t))
        boxes.append(Box3D(
            center=(z + BOX_THICKNESS / 2.0, -spec.lateral_offset, 0.0),
            length=BOX_THICKNESS, width=spec.object_width, height=spec.object_height,
            yaw=0.0, category="object", t_us=int(t_us), obj_id=1,
        ))
    poses = {int(t_us): RigidTransform.identity() for t_us in frame_t_us}
    taus = np.array([analytic_ttc(spec, float(t)) for t in frame_t])
    heights = np.array([analytic_height(spec, float(t)) for t in frame_t])
    return SynthBundle(spec, stream, frames, frame_t_us, boxes, poses, taus, heights)


# ---------------------------------------------------------------------------
# benchmark ladder

LADDER_TAUS = (0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0, -2.0, -5.0)
_LADDER_SENSOR = (320, 240)
_LADDER_FOCAL = 500.0
_LADDER_SPEED = 5.0
_LADDER_FPS = 10.0


def _ladder_spec(tau0: float, index: int) -> SceneSpec:
    intr = Intrinsics(fx=_LADDER_FOCAL, fy=_LADDER_FOCAL,
                      cx=_LADDER_SENSOR[0] / 2.0, cy=_LADDER_SENSOR[1] / 2.0,
                      size=_LADDER_SENSOR)
    speed = _LADDER_SPEED if tau0 > 0 else -_LADDER_SPEED
    z0 = tau0 * speed  # positive in both cases
    if tau0 > 0:
        duration = min(1.0, max(0.35, 0.5 * tau0))
        z_ref = z0 - speed * 0.2  # depth at the benchmark probe frame
    else:
        duration = 1.0
        z_ref = z0 - speed * 0.2
    height = 120.0 * z_ref / _LADDER_FOCAL  # ~120 px tall at the probe frame
    return SceneSpec(
        intrinsics=intr,
        object_width=1.1 * height,
        object_height=height,
        initial_depth=z0,
        speed=speed,
        duration=duration,
        frame_rate=_LADDER_FPS,
        name=f"ladder_{index:02d}_tau{tau0:+.1f}",
    )


def benchmark_ladder() -> list[SceneSpec]:
    """Ten deterministic noiseless scenes whose initial TTCs cover the
    crucial / small / large / negative evaluation ranges."""
    return [_ladder_spec(tau, i) for i, tau in enumerate(LADDER_TAUS)]


# ---------------------------------------------------------------------------
# PGM frame serialization (P5, 8-bit)


def write_pgm(image: np.ndarray, path) -> None:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(img * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0].strip() != b"P5":
        raise ValueError(f"{path}: not a binary PGM file")
    w, h = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    data = np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)
    return data.astype(np.float32) / maxval

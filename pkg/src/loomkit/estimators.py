"""Runtime TTC estimators: height-ratio inference from event voxel grids
or grayscale frame crops, late fusion in motion-in-depth space, and a
linear depth-extrapolation sanity baseline.

The scale estimators return the factor by which the current observation
is larger than the previous one; the height ratio h1/h2 is its inverse
and the TTC follows as dt / (1 - h1/h2).

Event voxel grids encode the freshest polarity per bin, so the content
of a window ending at T effectively references time
T - w (N - 1) / (2 N) (mean end-of-bin age over N bins of a length-w
window). Estimates are re-referenced to the frame timestamps through
this known lag before being reported, which keeps the emitted
(height_ratio, ttc) pair exactly consistent with the dt of the
observation.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .errors import EstimationError, FlatObjective, InputError, NoEvents, UndefinedTTC
from .events import EventSlice, EventStream, EventVoxelGrid, slice_window, voxelize
from .geometry import Grid2D, bilinear_sample_many
from .scale_match import ScaleMatch, match_scale, warm_up
from . import ttc as ttc_ops

MIN_ACTIVE_CELLS = 20
DEFAULT_ROI_SIZE = 128
DEFAULT_BINS = 5


@dataclass(frozen=True)
class RoiObservation:
    """One object observation pair ready for TTC estimation."""

    roi: tuple[float, float, float, float]  # (x0, y0, x1, y1) sensor pixels
    dt: float                               # seconds between the two samples
    t_us: int                               # timestamp of the current sample
    voxel_prev: EventVoxelGrid | None = None
    voxel_cur: EventVoxelGrid | None = None
    frame_prev: np.ndarray | None = None    # grayscale crops, same geometry
    frame_cur: np.ndarray | None = None
    obj_id: int | None = None

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.voxel_prev is not None and self.voxel_cur is not None:
            a, b = self.voxel_prev, self.voxel_cur
            if (a.width, a.height, a.bins) != (b.width, b.height, b.bins):
                raise ValueError("voxel crops must share identical geometry")
        if self.frame_prev is not None and self.frame_cur is not None:
            if self.frame_prev.shape != self.frame_cur.shape:
                raise ValueError("frame crops must share identical geometry")


@dataclass(frozen=True)
class TtcEstimate:
    tau_s: float
    height_ratio: float   # h1 / h2, equals the motion-in-depth eta
    confidence: float
    method: str
    t_us: int = 0
    obj_id: int | None = None


def _polarity_stack(grid: EventVoxelGrid) -> np.ndarray:
    """Map cell values {0, 0.5, 1} to {-1, 0, +1} so background is zero."""
    return (grid.values.astype(np.float32) - 0.5) * 2.0


def estimate_scale_events(voxel_prev: EventVoxelGrid, voxel_cur: EventVoxelGrid,
                          center: tuple[float, float] | None = None) -> ScaleMatch:
    """Scale of the current voxel grid relative to the previous one.

    Maximizes normalized cross-correlation between the previous grid and
    the current grid warped by 1/s about the ROI center, with a nested
    +-4 px translation search; golden-section to 1e-4 then parabolic
    refinement. Raises NoEvents below the active-cell floor and
    FlatObjective when the correlation peak has no prominence.
    """
    ref = _polarity_stack(voxel_prev)
    mov = _polarity_stack(voxel_cur)
    for name, stack in (("previous", ref), ("current", mov)):
        active = int(np.count_nonzero(stack))
        if active < MIN_ACTIVE_CELLS:
            raise NoEvents(f"{name} grid holds {active} event cells (< {MIN_ACTIVE_CELLS})")
    return match_scale(ref, mov, center)


def _gradient_magnitude(frame: np.ndarray) -> np.ndarray:
    g = np.asarray(frame, dtype=np.float32)
    gy, gx = np.gradient(g)
    return np.sqrt(gx * gx + gy * gy)


def estimate_scale_frames(frame_prev: np.ndarray, frame_cur: np.ndarray,
                          center: tuple[float, float] | None = None) -> ScaleMatch:
    """Frame-modality counterpart correlating gradient-magnitude maps."""
    ref = _gradient_magnitude(frame_prev)[None]
    mov = _gradient_magnitude(frame_cur)[None]
    if float(ref.max()) <= 1e-12 or float(mov.max()) <= 1e-12:
        raise FlatObjective("zero-gradient frame crop")
    return match_scale(ref, mov, center)


def _voxel_lag_s(grid: EventVoxelGrid) -> float:
    """Age of the voxel content relative to the window end.

    A moving edge paints each bin with its full swept path, so the band
    centroid sits at the bin midpoint; averaged over bins the content
    references the window midpoint, half a window before its end.
    """
    t0, t1 = grid.window
    return (t1 - t0) / 2e6


def _estimate_from_scale(match: ScaleMatch, obs: RoiObservation, method: str,
                         lag_s: float) -> TtcEstimate:
    ratio = 1.0 / match.scale
    tau = ttc_ops.ttc_from_height_ratio(ratio, 1.0, obs.dt)  # dt / (1 - ratio)
    if lag_s > 0.0:
        # re-reference from the voxel content time to the sample timestamp
        tau = tau - lag_s
        if tau == 0.0:
            raise UndefinedTTC("lag compensation lands on zero TTC")
        ratio = 1.0 - obs.dt / tau
    return TtcEstimate(tau_s=tau, height_ratio=ratio, confidence=match.confidence,
                       method=method, t_us=obs.t_us, obj_id=obs.obj_id)


def _events_estimate(obs: RoiObservation) -> TtcEstimate:
    if obs.voxel_prev is None or obs.voxel_cur is None:
        raise InputError("observation carries no event voxel grids")
    match = estimate_scale_events(obs.voxel_prev, obs.voxel_cur)
    return _estimate_from_scale(match, obs, "events", _voxel_lag_s(obs.voxel_cur))


def _frames_estimate(obs: RoiObservation) -> TtcEstimate:
    if obs.frame_prev is None or obs.frame_cur is None:
        raise InputError("observation carries no frame crops")
    match = estimate_scale_frames(obs.frame_prev, obs.frame_cur)
    return _estimate_from_scale(match, obs, "frames", 0.0)


def estimate_ttc(obs: RoiObservation, mode: str = "events") -> TtcEstimate:
    """Estimate TTC for one observation.

    Modes: "events", "frames", or "fused". Fusion converts each modality
    estimate to motion-in-depth, averages with confidence weights, and
    degrades to the surviving modality when one side fails; it raises
    EstimationError carrying both causes only when both fail.
    """
    if mode == "events":
        return _events_estimate(obs)
    if mode == "frames":
        return _frames_estimate(obs)
    if mode != "fused":
        raise InputError(f"unknown estimation mode {mode!r}")

    results, causes = [], []
    for name, runner in (("events", _events_estimate), ("frames", _frames_estimate)):
        try:
            results.append(runner(obs))
        except (NoEvents, FlatObjective, InputError, UndefinedTTC) as exc:
            causes.append((name, exc))
    if not results:
        raise EstimationError(causes)
    if len(results) == 1:
        single = results[0]
        return TtcEstimate(single.tau_s, single.height_ratio, single.confidence,
                           f"fused[{single.method}]", single.t_us, single.obj_id)
    weight = sum(r.confidence for r in results)
    if weight <= 0:
        weight, confs = float(len(results)), [1.0] * len(results)
    else:
        confs = [r.confidence for r in results]
    eta = sum(c * r.height_ratio for c, r in zip(confs, results)) / weight
    tau = ttc_ops.ttc_from_eta(eta, obs.dt)
    confidence = sum(confs) / len(results)
    return TtcEstimate(tau_s=tau, height_ratio=eta, confidence=min(confidence, 1.0),
                       method="fused", t_us=obs.t_us, obj_id=obs.obj_id)


def linear_extrapolation_baseline(samples) -> float:
    """Least-squares depth-line fit; TTC = z(t_last) / (-slope)."""
    pts = np.asarray(samples, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise InputError("need at least two (t, z) samples")
    t, z = pts[:, 0], pts[:, 1]
    if np.unique(t).size < 2:
        raise InputError("samples need at least two distinct times")
    slope, intercept = np.polyfit(t, z, 1)
    if abs(slope) < ttc_ops.EPS_SPEED:
        raise UndefinedTTC(f"|dz/dt|={abs(slope):.2e} m/s below {ttc_ops.EPS_SPEED}")
    z_last = slope * t[-1] + intercept
    return float(z_last / -slope)


# ---------------------------------------------------------------------------
# ROI extraction


def clamp_roi(roi, sensor_size, square: bool = True):
    """Clamp an ROI box inside the sensor, preserving its side length."""
    x0, y0, x1, y1 = (float(v) for v in roi)
    w, h = sensor_size
    side_x, side_y = x1 - x0, y1 - y0
    if square:
        side_x = side_y = min(max(side_x, side_y), w, h)
    side_x, side_y = min(side_x, w), min(side_y, h)
    cx = min(max((x0 + x1) / 2.0, side_x / 2.0), w - side_x / 2.0)
    cy = min(max((y0 + y1) / 2.0, side_y / 2.0), h - side_y / 2.0)
    return (cx - side_x / 2.0, cy - side_y / 2.0, cx + side_x / 2.0, cy + side_y / 2.0)


_DITHER_PHI = 0.6180339887498949  # golden-ratio fraction, decorrelates rows


def roi_voxel_grid(stream: EventStream, window: tuple[int, int], roi,
                   bins: int = DEFAULT_BINS, out_size: int = DEFAULT_ROI_SIZE) -> EventVoxelGrid:
    """Voxelize the events inside an ROI onto an out_size x out_size grid.

    Event coordinates are remapped into the ROI frame and re-binned, so
    cell values stay in {0, 0.5, 1} (no image resampling). Quantization
    onto the coarser grid uses dithered rounding keyed to the transverse
    coordinate: rounding phases then vary along an axis-aligned edge,
    which keeps band centroids unbiased instead of snapping whole edges
    to the same cell boundary. Exact 1:1 crops are left untouched.
    """
    x0, y0, x1, y1 = roi
    slc = slice_window(stream, window[0], window[1])
    inside = (slc.xs >= x0) & (slc.xs < x1) & (slc.ys >= y0) & (slc.ys < y1)
    sx = out_size / (x1 - x0)
    sy = out_size / (y1 - y0)
    ex = slc.xs[inside]
    ey = slc.ys[inside]
    u = (ex + 0.5 - x0) * sx - 0.5
    v = (ey + 0.5 - y0) * sy - 0.5
    du = ((ey + 1) * _DITHER_PHI) % 1.0
    dv = ((ex + 1) * _DITHER_PHI) % 1.0
    xs = np.clip(np.floor(u + du), 0, out_size - 1).astype(np.int32)
    ys = np.clip(np.floor(v + dv), 0, out_size - 1).astype(np.int32)
    remapped = EventSlice((out_size, out_size), slc.window,
                          xs, ys, slc.ts[inside], slc.ps[inside])
    return voxelize(remapped, bins, (out_size, out_size))


def crop_frame(frame: np.ndarray, roi, out_size: int = DEFAULT_ROI_SIZE) -> np.ndarray:
    """Bilinearly resample an ROI of a grayscale frame to out_size^2."""
    x0, y0, x1, y1 = roi
    u = x0 + (np.arange(out_size) + 0.5) * (x1 - x0) / out_size - 0.5
    v = y0 + (np.arange(out_size) + 0.5) * (y1 - y0) / out_size - 0.5
    uu, vv = np.meshgrid(u, v)
    grid = Grid2D(np.asarray(frame, dtype=np.float64))
    return bilinear_sample_many(grid, np.stack([uu, vv], axis=-1))[..., 0].astype(np.float32)


def build_observation(stream: EventStream, t_prev_us: int, t_cur_us: int, roi,
                      frames: tuple[np.ndarray, np.ndarray] | None = None,
                      bins: int = DEFAULT_BINS, out_size: int = DEFAULT_ROI_SIZE,
                      obj_id: int | None = None) -> RoiObservation:
    """Assemble an RoiObservation from a stream (and optional frame pair).

    The event windows are the inter-sample intervals ending at each
    timestamp: [2 t_prev - t_cur, t_prev) and [t_prev, t_cur).
    """
    if t_cur_us <= t_prev_us:
        raise InputError("t_cur must be after t_prev")
    dt_us = t_cur_us - t_prev_us
    roi = clamp_roi(roi, stream.sensor_size)
    vox_prev = roi_voxel_grid(stream, (t_prev_us - dt_us, t_prev_us), roi, bins, out_size)
    vox_cur = roi_voxel_grid(stream, (t_prev_us, t_cur_us), roi, bins, out_size)
    frame_prev = frame_cur = None
    if frames is not None:
        frame_prev = crop_frame(frames[0], roi, out_size)
        frame_cur = crop_frame(frames[1], roi, out_size)
    return RoiObservation(
        roi=tuple(roi), dt=dt_us / 1e6, t_us=int(t_cur_us),
        voxel_prev=vox_prev, voxel_cur=vox_cur,
        frame_prev=frame_prev, frame_cur=frame_cur, obj_id=obj_id,
    )


def benchmark_events_throughput(count: int = 300, bins: int = DEFAULT_BINS,
                                size: int = DEFAULT_ROI_SIZE, seed: int = 0) -> dict:
    """Time repeated events-mode estimates on one synthetic looming ROI.

    JIT warm-up runs before the clock starts; the loop is single threaded.
    """
    from . import synth

    spec = synth.benchmark_ladder()[2]  # tau0 = 2 s, a mid-range scene
    bundle = synth.generate(spec, seed=seed)
    t1, t2 = int(bundle.frame_t_us[1]), int(bundle.frame_t_us[2])
    roi = roi_around_object(bundle, 2)
    obs = build_observation(bundle.stream, t1, t2, roi, bins=bins, out_size=size)
    warm_up()
    for _ in range(3):
        estimate_ttc(obs, "events")
    start = time.perf_counter()
    for _ in range(count):
        estimate_ttc(obs, "events")
    elapsed = time.perf_counter() - start
    return {
        "count": count,
        "seconds": elapsed,
        "roi_per_s": count / elapsed,
        "roi_size": size,
        "bins": bins,
    }


def roi_around_object(bundle, frame_index: int, margin: float = 1.6):
    """Square ROI around the projected object extent at one frame."""
    from . import synth

    spec = bundle.spec
    t = frame_index / spec.frame_rate
    u_lo, u_hi, v_lo, v_hi = synth.projected_extent(spec, t)
    side = margin * max(u_hi - u_lo, v_hi - v_lo)
    cx, cy = (u_lo + u_hi) / 2.0, (v_lo + v_hi) / 2.0
    return clamp_roi((cx - side / 2, cy - side / 2, cx + side / 2, cy + side / 2),
                     spec.intrinsics.size)

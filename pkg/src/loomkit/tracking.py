"""3D multi-object tracking and TTC ground-truth labeling.

The track state is the 11-vector (x, y, z, yaw, l, w, h, vx, vy, vz,
vyaw) in the world frame (x forward, y left, z up), with a constant-
velocity motion model. Detections are associated to tracks by Hungarian
assignment on 1 - BEV-IoU, gated at IoU 0.1. Confirmed trajectories are
temporally smoothed offline and labeled with nearest-corner TTC.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from shapely.geometry import Polygon

from .errors import InputError, SingularInnovationCovariance, UndefinedTTC
from .geometry import Intrinsics, RigidTransform
from .ttc import ttc_from_depth_speed

STATE_DIM = 11
MEAS_DIM = 7  # (x, y, z, yaw, l, w, h)

# ego frame (x fwd, y left, z up) -> camera frame (x right, y down, z fwd)
EGO_TO_CAM_STANDARD = RigidTransform(
    np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]]),
    np.zeros(3),
)


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a > math.pi:
        a -= 2.0 * math.pi
    elif a <= -math.pi:
        a += 2.0 * math.pi
    return a


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box: center (x, y, z), sizes along heading / across /
    vertical, yaw about +z, wrapped to (-pi, pi]."""

    center: tuple[float, float, float]
    length: float
    width: float
    height: float
    yaw: float
    category: str = "object"
    t_us: int = 0
    score: float | None = None
    obj_id: int | None = None

    def __post_init__(self):
        if min(self.length, self.width, self.height) <= 0:
            raise ValueError("box sizes must be positive")
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    def footprint(self) -> np.ndarray:
        """Ground-plane corner coordinates (4, 2)."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        ux, uy = c * self.length / 2.0, s * self.length / 2.0
        vx, vy = -s * self.width / 2.0, c * self.width / 2.0
        x0, y0 = self.center[0], self.center[1]
        return np.array([
            [x0 + ux + vx, y0 + uy + vy],
            [x0 + ux - vx, y0 + uy - vy],
            [x0 - ux - vx, y0 - uy - vy],
            [x0 - ux + vx, y0 - uy + vy],
        ])

    def corners(self) -> np.ndarray:
        """All 8 corners (8, 3) in the world frame."""
        foot = self.footprint()
        lo = self.center[2] - self.height / 2.0
        hi = self.center[2] + self.height / 2.0
        return np.concatenate([
            np.column_stack([foot, np.full(4, lo)]),
            np.column_stack([foot, np.full(4, hi)]),
        ])


@dataclass
class TrackState:
    """Kalman state of one tracked object."""

    mean: np.ndarray          # (11,)
    cov: np.ndarray           # (11, 11)
    track_id: int
    category: str = "object"
    age: int = 0              # frames since last match
    hit_count: int = 1

    def box(self, t_us: int = 0) -> Box3D:
        m = self.mean
        return Box3D(
            center=(m[0], m[1], m[2]),
            length=max(m[4], 1e-6), width=max(m[5], 1e-6), height=max(m[6], 1e-6),
            yaw=m[3], category=self.category, t_us=t_us, obj_id=self.track_id,
        )


@dataclass(frozen=True)
class TTCRecord:
    """Per-object, per-timestamp TTC label with its provenance values."""

    obj_id: int
    t_us: int
    tau_s: float | None
    z_min: float
    v_rel: float
    flag: str | None = None  # None | "undefined" | "behind_camera"


@dataclass(frozen=True)
class TrackerConfig:
    q_position: float = 0.01
    q_yaw: float = 1e-4
    q_size: float = 1e-6
    q_velocity: float = 0.1
    q_yaw_rate: float = 1e-3
    r_position: float = 0.04
    r_yaw: float = 1e-2
    r_size: float = 0.01
    iou_gate: float = 0.1
    min_hits: int = 2
    max_age: int = 3
    p0_velocity: float = 100.0
    p0_yaw_rate: float = 10.0

    def q_matrix(self) -> np.ndarray:
        return np.diag([self.q_position] * 3 + [self.q_yaw] + [self.q_size] * 3
                       + [self.q_velocity] * 3 + [self.q_yaw_rate])

    def r_matrix(self) -> np.ndarray:
        return np.diag([self.r_position] * 3 + [self.r_yaw] + [self.r_size] * 3)

    def p0_matrix(self) -> np.ndarray:
        return np.diag([self.r_position] * 3 + [self.r_yaw] + [self.r_size] * 3
                       + [self.p0_velocity] * 3 + [self.p0_yaw_rate])


def predict(track: TrackState, dt: float, cfg: TrackerConfig | None = None) -> TrackState:
    """Constant-velocity propagation with additive process noise."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    cfg = cfg or TrackerConfig()
    f = np.eye(STATE_DIM)
    for pos, vel in ((0, 7), (1, 8), (2, 9), (3, 10)):
        f[pos, vel] = dt
    mean = f @ track.mean
    mean[3] = wrap_angle(mean[3])
    cov = f @ track.cov @ f.T + cfg.q_matrix()
    return replace(track, mean=mean, cov=(cov + cov.T) / 2.0)


def update(track: TrackState, detection: Box3D, cfg: TrackerConfig | None = None) -> TrackState:
    """Standard Kalman measurement update with a wrapped yaw innovation."""
    cfg = cfg or TrackerConfig()
    z = np.array([*detection.center, detection.yaw,
                  detection.length, detection.width, detection.height])
    h = np.zeros((MEAS_DIM, STATE_DIM))
    h[:MEAS_DIM, :MEAS_DIM] = np.eye(MEAS_DIM)
    r = cfg.r_matrix()
    innovation = z - track.mean[:MEAS_DIM]
    innovation[3] = wrap_angle(innovation[3])
    s = track.cov[:MEAS_DIM, :MEAS_DIM] + r
    if not np.all(np.isfinite(s)) or np.linalg.cond(s) > 1e12:
        raise SingularInnovationCovariance("innovation covariance is ill-conditioned")
    gain = np.linalg.solve(s.T, track.cov[:, :MEAS_DIM].T).T
    mean = track.mean + gain @ innovation
    mean[3] = wrap_angle(mean[3])
    ikh = np.eye(STATE_DIM) - gain @ h
    cov = ikh @ track.cov @ ikh.T + gain @ r @ gain.T  # Joseph form keeps PSD
    return replace(track, mean=mean, cov=(cov + cov.T) / 2.0,
                   hit_count=track.hit_count + 1, age=0,
                   category=detection.category)


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Ground-plane IoU of two oriented box footprints."""
    pa = Polygon(a.footprint())
    pb = Polygon(b.footprint())
    inter = pa.intersection(pb).area
    union = pa.area + pb.area - inter
    return inter / union if union > 0 else 0.0


def associate(tracks: Sequence[TrackState], detections: Sequence[Box3D],
              iou_gate: float = 0.1):
    """Hungarian assignment on cost = 1 - BEV-IoU, gated at ``iou_gate``.

    Returns (matched (track_idx, det_idx) pairs, unmatched track indices,
    unmatched detection indices).
    """
    if not tracks or not detections:
        return [], list(range(len(tracks))), list(range(len(detections)))
    iou = np.zeros((len(tracks), len(detections)))
    for i, tr in enumerate(tracks):
        tb = tr.box()
        for j, det in enumerate(detections):
            iou[i, j] = bev_iou(tb, det)
    rows, cols = linear_sum_assignment(1.0 - iou)
    matched = [(int(i), int(j)) for i, j in zip(rows, cols) if iou[i, j] >= iou_gate]
    matched_t = {i for i, _ in matched}
    matched_d = {j for _, j in matched}
    return (matched,
            [i for i in range(len(tracks)) if i not in matched_t],
            [j for j in range(len(detections)) if j not in matched_d])


@dataclass
class Trajectory:
    track_id: int
    category: str
    t_us: np.ndarray    # (F,)
    means: np.ndarray   # (F, 11)

    def __len__(self) -> int:
        return self.t_us.size


class MultiObjectTracker:
    """Predict / associate / update tracker with track lifecycle management.

    Unmatched detections spawn tentative tracks that are confirmed after
    ``min_hits`` matches; on the second hit the velocity is initialized
    from the position difference (and back-filled into the first history
    entry). Tracks coasting for more than ``max_age`` frames terminate.
    Track ids are never reused.
    """

    def __init__(self, cfg: TrackerConfig | None = None):
        self.cfg = cfg or TrackerConfig()
        self._next_id = 1
        self._last_t_us: int | None = None
        self._active: list[TrackState] = []
        # track_id -> list of [t_us, mean copy, matched flag]
        self._history: dict[int, list] = {}
        self._category: dict[int, str] = {}
        self._max_hits: dict[int, int] = {}

    def step(self, detections: Sequence[Box3D], t_us: int) -> list[TrackState]:
        """Advance one frame; returns snapshots of confirmed tracks."""
        if self._last_t_us is not None:
            if t_us <= self._last_t_us:
                raise InputError("detection timestamps must be strictly increasing")
            dt = (t_us - self._last_t_us) / 1e6
            self._active = [predict(tr, dt, self.cfg) for tr in self._active]
        self._last_t_us = t_us

        matched, unmatched_tracks, unmatched_dets = associate(
            self._active, detections, self.cfg.iou_gate)

        for ti, di in matched:
            track = self._active[ti]
            if track.hit_count == 1:
                self._active[ti] = self._second_hit_init(track, detections[di], t_us)
            else:
                self._active[ti] = update(track, detections[di], self.cfg)

        survivors = []
        for idx, track in enumerate(self._active):
            if idx in unmatched_tracks:
                track = replace(track, age=track.age + 1)
                if track.age > self.cfg.max_age:
                    continue
            survivors.append(track)
        self._active = survivors

        for di in unmatched_dets:
            self._active.append(self._spawn(detections[di]))

        confirmed = []
        for track in self._active:
            self._record(track, t_us, track.age == 0)
            if track.hit_count >= self.cfg.min_hits:
                confirmed.append(track)
        return confirmed

    def _spawn(self, det: Box3D) -> TrackState:
        mean = np.zeros(STATE_DIM)
        mean[:3] = det.center
        mean[3] = det.yaw
        mean[4:7] = (det.length, det.width, det.height)
        track = TrackState(mean, self.cfg.p0_matrix(), self._next_id,
                           category=det.category)
        self._next_id += 1
        return track

    def _second_hit_init(self, track: TrackState, det: Box3D, t_us: int) -> TrackState:
        """Two-point initialization replacing the diffuse velocity prior."""
        hist = self._history.get(track.track_id)
        prev_t, prev_mean, _ = hist[-1]
        dt = (t_us - prev_t) / 1e6
        mean = np.zeros(STATE_DIM)
        mean[:3] = det.center
        mean[3] = det.yaw
        mean[4:7] = (det.length, det.width, det.height)
        mean[7:10] = (np.asarray(det.center) - prev_mean[:3]) / dt
        mean[10] = wrap_angle(det.yaw - prev_mean[3]) / dt
        cov = self.cfg.p0_matrix()
        vel_var = 2.0 * self.cfg.r_position / dt**2
        cov[7, 7] = cov[8, 8] = cov[9, 9] = vel_var
        cov[10, 10] = 2.0 * self.cfg.r_yaw / dt**2
        # back-fill the tentative first sample with the measured velocity
        prev_mean[7:] = mean[7:]
        return replace(track, mean=mean, cov=cov,
                       hit_count=track.hit_count + 1, age=0,
                       category=det.category)

    def _record(self, track: TrackState, t_us: int, matched: bool) -> None:
        self._history.setdefault(track.track_id, []).append(
            [t_us, track.mean.copy(), matched])
        self._category[track.track_id] = track.category
        self._max_hits[track.track_id] = max(
            self._max_hits.get(track.track_id, 0), track.hit_count)

    def trajectories(self) -> list[Trajectory]:
        """Confirmed trajectories, trimmed of trailing coasted predictions."""
        out = []
        for tid, entries in self._history.items():
            if self._max_hits.get(tid, 0) < self.cfg.min_hits:
                continue
            last = max(i for i, e in enumerate(entries) if e[2])
            kept = entries[: last + 1]
            out.append(Trajectory(
                track_id=tid,
                category=self._category[tid],
                t_us=np.array([e[0] for e in kept], dtype=np.int64),
                means=np.array([e[1] for e in kept], dtype=np.float64),
            ))
        out.sort(key=lambda tr: tr.track_id)
        return out


def smooth_trajectory(traj: Trajectory, window: int = 5) -> Trajectory:
    """Zero-phase centered moving average over positions and velocities.

    Yaw is averaged on the circle (mean of unit headings); endpoints use
    shrunken symmetric windows, which keeps linear motion exactly linear.
    Sizes pass through untouched.
    """
    if len(traj) == 0:
        raise ValueError("trajectory must contain at least one state")
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd number")
    n = len(traj)
    half_max = window // 2
    means = traj.means.copy()
    smoothed = means.copy()
    lin_idx = [0, 1, 2, 7, 8, 9, 10]
    for i in range(n):
        half = min(half_max, i, n - 1 - i)
        seg = means[i - half: i + half + 1]
        smoothed[i, lin_idx] = seg[:, lin_idx].mean(axis=0)
        smoothed[i, 3] = math.atan2(np.sin(seg[:, 3]).mean(), np.cos(seg[:, 3]).mean())
    return Trajectory(traj.track_id, traj.category, traj.t_us.copy(), smoothed)


def _ego_velocities(t_us: np.ndarray, poses: Sequence[RigidTransform]) -> np.ndarray:
    """World-frame ego velocity by central differences (one-sided at ends)."""
    n = len(poses)
    pos = np.array([p.translation for p in poses])
    if n == 1:
        return np.zeros((1, 3))
    vel = np.empty((n, 3))
    t = t_us.astype(np.float64) / 1e6
    vel[0] = (pos[1] - pos[0]) / (t[1] - t[0])
    vel[-1] = (pos[-1] - pos[-2]) / (t[-1] - t[-2])
    for i in range(1, n - 1):
        vel[i] = (pos[i + 1] - pos[i - 1]) / (t[i + 1] - t[i - 1])
    return vel


def label_ttc(traj: Trajectory, ego_poses: dict[int, RigidTransform],
              intr: Intrinsics | None = None,
              ego_to_cam: RigidTransform = EGO_TO_CAM_STANDARD) -> list[TTCRecord]:
    """Label every trajectory timestamp with nearest-corner TTC.

    Per timestamp the 8 box corners go into the camera frame and z_min is
    the smallest corner depth; the relative speed is the depth-axis
    component of (ego velocity - object velocity), computed in the world
    frame and rotated into the camera. ``intr`` is accepted for interface
    parity with image-space tooling; the label itself is purely metric.
    """
    missing = [int(t) for t in traj.t_us if int(t) not in ego_poses]
    if missing:
        raise InputError(f"ego poses missing for timestamps {missing[:3]}")
    poses = [ego_poses[int(t)] for t in traj.t_us]
    ego_vel = _ego_velocities(traj.t_us, poses)
    records = []
    for i, t in enumerate(traj.t_us):
        mean = traj.means[i]
        state = TrackState(mean, np.eye(STATE_DIM), traj.track_id, traj.category)
        corners = state.box(int(t)).corners()
        world_to_cam = ego_to_cam @ poses[i].inverse()
        z_min = float(world_to_cam.apply(corners)[:, 2].min())
        v_world = ego_vel[i] - mean[7:10]
        v_rel = float((world_to_cam.rotation @ v_world)[2])
        if z_min <= 0:
            records.append(TTCRecord(traj.track_id, int(t), None, z_min, v_rel,
                                     flag="behind_camera"))
            continue
        try:
            tau = ttc_from_depth_speed(z_min, v_rel)
            records.append(TTCRecord(traj.track_id, int(t), tau, z_min, v_rel))
        except UndefinedTTC:
            records.append(TTCRecord(traj.track_id, int(t), None, z_min, v_rel,
                                     flag="undefined"))
    return records


# ---------------------------------------------------------------------------
# JSON-lines interchange


def read_boxes_jsonl(path) -> list[Box3D]:
    boxes = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            boxes.append(Box3D(
                center=tuple(d["center"]),
                length=d["size"][0], width=d["size"][1], height=d["size"][2],
                yaw=d["yaw"], category=d.get("category", "object"),
                t_us=int(d["t_us"]), score=d.get("score"),
                obj_id=d.get("id"),
            ))
    return boxes


def write_boxes_jsonl(boxes: Sequence[Box3D], path) -> None:
    with open(path, "w") as f:
        for b in boxes:
            d = {
                "t_us": b.t_us,
                "category": b.category,
                "center": list(b.center),
                "size": [b.length, b.width, b.height],
                "yaw": b.yaw,
            }
            if b.obj_id is not None:
                d["id"] = b.obj_id
            if b.score is not None:
                d["score"] = b.score
            f.write(json.dumps(d) + "\n")


def read_poses_jsonl(path) -> dict[int, RigidTransform]:
    poses = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            poses[int(d["t_us"])] = RigidTransform.from_flat(d["rotation"], d["translation"])
    return poses


def write_poses_jsonl(poses: dict[int, RigidTransform], path) -> None:
    with open(path, "w") as f:
        for t_us in sorted(poses):
            p = poses[t_us]
            f.write(json.dumps({
                "t_us": int(t_us),
                "rotation": [float(v) for v in p.rotation.reshape(-1)],
                "translation": [float(v) for v in p.translation],
            }) + "\n")


def write_ttc_jsonl(records: Sequence[TTCRecord], path) -> None:
    with open(path, "w") as f:
        for r in records:
            d = {
                "t_us": r.t_us,
                "id": r.obj_id,
                "ttc_s": r.tau_s if r.tau_s is not None else "undefined",
                "z_min": r.z_min,
                "v_rel": r.v_rel,
            }
            if r.flag is not None:
                d["flag"] = r.flag
            f.write(json.dumps(d) + "\n")


def read_ttc_jsonl(path) -> list[TTCRecord]:
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            tau = d["ttc_s"]
            records.append(TTCRecord(
                obj_id=int(d["id"]), t_us=int(d["t_us"]),
                tau_s=None if tau == "undefined" else float(tau),
                z_min=float(d.get("z_min", 0.0)), v_rel=float(d.get("v_rel", 0.0)),
                flag=d.get("flag"),
            ))
    return records

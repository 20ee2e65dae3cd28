"""Evaluation suite: motion-in-depth error, relative TTC error, failure
ratio, bucketed weighted aggregation, and center-distance detection
metrics (AP / ATE / ASE / AOE).

TTC ground truths are scored inside four ranges: crucial (0, 3], small
(3, 6], large (6, 10] and negative [-10, 0) seconds, weighted
0.5 / 0.3 / 0.1 / 0.1 in the overall score. Predictions that are
non-finite, have non-positive motion-in-depth, or fall outside |tau| <=
10 s count toward the failure ratio and are excluded from bucket means.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InputError, InvalidPrediction, NoMatches
from .tracking import Box3D

BUCKET_NAMES = ("crucial", "small", "large", "negative")
BUCKET_RANGES = {
    "crucial": (0.0, 3.0),    # (0, 3]
    "small": (3.0, 6.0),      # (3, 6]
    "large": (6.0, 10.0),     # (6, 10]
    "negative": (-10.0, 0.0), # [-10, 0)
}
BUCKET_WEIGHTS = {"crucial": 0.5, "small": 0.3, "large": 0.1, "negative": 0.1}
TTC_EVAL_LIMIT = 10.0  # |tau| beyond this is outside every evaluation range
MID_SCALE = 1.0e4


@dataclass(frozen=True)
class TtcEvalConfig:
    dt: float = 0.1
    weights: dict = field(default_factory=lambda: dict(BUCKET_WEIGHTS))
    distance_thresholds: tuple = (0.5, 1.0, 2.0, 4.0)
    tp_threshold: float = 2.0   # matches used for ATE/ASE/AOE
    min_recall: float = 0.1
    min_precision: float = 0.1

    def __post_init__(self):
        total = sum(self.weights[b] for b in BUCKET_NAMES)
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"bucket weights must sum to 1, got {total}")


def bucket_of(gt_tau: float) -> str | None:
    """Bucket name for a ground-truth TTC, or None when out of range."""
    if 0.0 < gt_tau <= 3.0:
        return "crucial"
    if 3.0 < gt_tau <= 6.0:
        return "small"
    if 6.0 < gt_tau <= 10.0:
        return "large"
    if -10.0 <= gt_tau < 0.0:
        return "negative"
    return None


def _eta(tau: float, dt: float) -> float:
    return 1.0 - dt / tau


def mid_error(pred_tau: float, gt_tau: float, dt: float) -> float:
    """Motion-in-depth error |ln(eta_hat) - ln(eta)| * 1e4 (natural log)."""
    if gt_tau == 0.0 or _eta(gt_tau, dt) <= 0:
        raise ValueError(f"ground truth tau {gt_tau} has non-positive motion-in-depth")
    if not math.isfinite(pred_tau) or pred_tau == 0.0:
        raise InvalidPrediction(f"prediction {pred_tau} is not evaluable")
    eta_hat = _eta(pred_tau, dt)
    if eta_hat <= 0:
        raise InvalidPrediction(f"prediction {pred_tau} gives motion-in-depth {eta_hat} <= 0")
    return abs(math.log(eta_hat) - math.log(_eta(gt_tau, dt))) * MID_SCALE


def rte(pred_tau: float, gt_tau: float) -> float:
    """Relative TTC error in percent: |gt - pred| / |gt| * 100."""
    if gt_tau == 0.0:
        raise ValueError("ground truth tau must be nonzero")
    return abs(gt_tau - pred_tau) / abs(gt_tau) * 100.0


def prediction_is_valid(pred_tau: float | None, dt: float) -> bool:
    """Failure-ratio rule: finite, |tau| <= 10 s, and positive eta."""
    if pred_tau is None or not math.isfinite(pred_tau) or pred_tau == 0.0:
        return False
    if abs(pred_tau) > TTC_EVAL_LIMIT:
        return False
    return _eta(pred_tau, dt) > 0


@dataclass
class BucketStats:
    count: int = 0            # ground truths landing in the bucket
    valid: int = 0            # predictions that could be scored
    mid_mean: float | None = None
    rte_mean: float | None = None

    @property
    def failure_ratio(self) -> float | None:
        if self.count == 0:
            return None
        return (self.count - self.valid) / self.count


@dataclass
class MetricsReport:
    buckets: dict            # name -> BucketStats
    overall_mid: float | None
    overall_rte: float | None
    overall_failure_ratio: float | None
    weights_renormalized: bool
    excluded_gt: int         # ground truths outside every range / unscorable
    detection: dict | None = None

    def to_dict(self) -> dict:
        doc = {
            "buckets": {
                name: {
                    "count": b.count,
                    "valid": b.valid,
                    "failure_ratio": b.failure_ratio,
                    "mid_mean": b.mid_mean,
                    "rte_mean": b.rte_mean,
                }
                for name, b in self.buckets.items()
            },
            "overall": {
                "mid": self.overall_mid,
                "rte": self.overall_rte,
                "failure_ratio": self.overall_failure_ratio,
                "weights_renormalized": self.weights_renormalized,
            },
            "excluded_gt": self.excluded_gt,
        }
        if self.detection is not None:
            doc["detection"] = self.detection
        return doc

    def to_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")

    def csv_rows(self) -> list[list]:
        rows = [["section", "name", "metric", "value"]]
        for name in BUCKET_NAMES:
            b = self.buckets[name]
            rows.append(["ttc", name, "mid", b.mid_mean])
            rows.append(["ttc", name, "rte", b.rte_mean])
            rows.append(["ttc", name, "failure_ratio", b.failure_ratio])
            rows.append(["ttc", name, "count", b.count])
        rows.append(["ttc", "overall", "mid", self.overall_mid])
        rows.append(["ttc", "overall", "rte", self.overall_rte])
        rows.append(["ttc", "overall", "failure_ratio", self.overall_failure_ratio])
        if self.detection is not None:
            for thr, ap in self.detection["ap"].items():
                rows.append(["detection", f"ap@{thr}", "ap", ap])
            rows.append(["detection", "mean", "ap", self.detection["mean_ap"]])
            for key in ("ate", "ase", "aoe"):
                rows.append(["detection", "tp", key, self.detection[key]])
        return rows

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            csv.writer(f).writerows(self.csv_rows())


def weighted_overall(values: dict, weights: dict | None = None) -> tuple[float | None, bool]:
    """Weighted sum over buckets, renormalizing when some are absent.

    Returns (overall, renormalized flag); None when every bucket is absent.
    """
    weights = weights or BUCKET_WEIGHTS
    present = [b for b in BUCKET_NAMES if values.get(b) is not None]
    if not present:
        return None, False
    wsum = sum(weights[b] for b in present)
    overall = sum(weights[b] * values[b] for b in present) / wsum
    return overall, len(present) < len(BUCKET_NAMES)


def aggregate(records: Sequence[tuple[float | None, float]],
              cfg: TtcEvalConfig | None = None) -> MetricsReport:
    """Score (prediction, ground truth) TTC pairs into a bucketed report.

    Invalid predictions are excluded from the bucket means but counted in
    the failure ratio; ground truths outside every bucket (or with
    non-positive motion-in-depth at the configured dt) are excluded and
    tallied in ``excluded_gt``.
    """
    cfg = cfg or TtcEvalConfig()
    mids = {b: [] for b in BUCKET_NAMES}
    rtes = {b: [] for b in BUCKET_NAMES}
    stats = {b: BucketStats() for b in BUCKET_NAMES}
    excluded = 0
    for pred, gt in records:
        name = bucket_of(gt)
        if name is None or _eta(gt, cfg.dt) <= 0:
            excluded += 1
            continue
        stats[name].count += 1
        if not prediction_is_valid(pred, cfg.dt):
            continue
        stats[name].valid += 1
        mids[name].append(mid_error(pred, gt, cfg.dt))
        rtes[name].append(rte(pred, gt))
    for name in BUCKET_NAMES:
        if mids[name]:
            stats[name].mid_mean = float(np.mean(mids[name]))
            stats[name].rte_mean = float(np.mean(rtes[name]))
    overall_mid, renorm = weighted_overall(
        {b: stats[b].mid_mean for b in BUCKET_NAMES}, cfg.weights)
    overall_rte, _ = weighted_overall(
        {b: stats[b].rte_mean for b in BUCKET_NAMES}, cfg.weights)
    overall_fr, _ = weighted_overall(
        {b: stats[b].failure_ratio for b in BUCKET_NAMES}, cfg.weights)
    return MetricsReport(
        buckets=stats,
        overall_mid=overall_mid,
        overall_rte=overall_rte,
        overall_failure_ratio=overall_fr,
        weights_renormalized=renorm,
        excluded_gt=excluded,
    )


# ---------------------------------------------------------------------------
# detection metrics


def _ground_distance(a: Box3D, b: Box3D) -> float:
    dx = a.center[0] - b.center[0]
    dy = a.center[1] - b.center[1]
    return math.hypot(dx, dy)


@dataclass
class MatchResult:
    threshold: float
    order: list            # prediction indices in descending score order
    gt_for_pred: list      # matched gt index per ordered prediction, or None
    n_gt: int

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return [(p, g) for p, g in zip(self.order, self.gt_for_pred) if g is not None]


def match_detections(preds: Sequence[Box3D], gts: Sequence[Box3D],
                     thresholds: Sequence[float] = (0.5, 1.0, 2.0, 4.0)) -> dict:
    """Greedy score-ordered matching on ground-plane center distance.

    Each prediction (highest score first) claims the nearest still
    unmatched ground truth within the distance threshold.
    """
    for p in preds:
        if p.score is None:
            raise InputError("predictions must carry scores")
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    out = {}
    for thr in thresholds:
        taken = [False] * len(gts)
        matched = []
        for pi in order:
            best, best_d = None, float(thr)
            for gi, g in enumerate(gts):
                if taken[gi]:
                    continue
                d = _ground_distance(preds[pi], g)
                if d <= best_d:
                    best, best_d = gi, d
            if best is not None:
                taken[best] = True
            matched.append(best)
        out[thr] = MatchResult(thr, order, matched, len(gts))
    return out


def average_precision(match: MatchResult, cfg: TtcEvalConfig | None = None) -> float:
    """Normalized area under the interpolated precision-recall curve.

    Precision is resampled at 101 recall points; operating points below
    the minimum recall/precision (0.1 each) are clipped away and the
    remainder renormalized, following the center-distance evaluation
    convention this mirrors.
    """
    cfg = cfg or TtcEvalConfig()
    if match.n_gt == 0 or not match.order:
        return 0.0
    tp = np.cumsum([g is not None for g in match.gt_for_pred]).astype(np.float64)
    npred = np.arange(1, len(match.order) + 1, dtype=np.float64)
    prec = tp / npred
    rec = tp / match.n_gt
    rec_interp = np.linspace(0.0, 1.0, 101)
    prec_interp = np.interp(rec_interp, rec, prec, right=0.0)
    start = round(100 * cfg.min_recall) + 1
    clipped = prec_interp[start:] - cfg.min_precision
    clipped[clipped < 0] = 0.0
    return float(np.mean(clipped) / (1.0 - cfg.min_precision))


def _aligned_iou3d(a: Box3D, b: Box3D) -> float:
    """3D IoU after aligning translation and orientation, which reduces to
    the axis-aligned overlap of the two size vectors."""
    inter = (min(a.length, b.length) * min(a.width, b.width) * min(a.height, b.height))
    va = a.length * a.width * a.height
    vb = b.length * b.width * b.height
    return inter / (va + vb - inter)


def _yaw_difference(a: float, b: float) -> float:
    d = (a - b) % (2.0 * math.pi)
    if d > math.pi:
        d = 2.0 * math.pi - d
    return abs(d)


def tp_metrics(pairs: Sequence[tuple[Box3D, Box3D]]) -> tuple[float, float, float]:
    """(ATE, ASE, AOE) over matched prediction/ground-truth box pairs."""
    if not pairs:
        raise NoMatches("tp_metrics needs at least one matched pair")
    ate = float(np.mean([_ground_distance(p, g) for p, g in pairs]))
    ase = float(np.mean([1.0 - _aligned_iou3d(p, g) for p, g in pairs]))
    aoe = float(np.mean([_yaw_difference(p.yaw, g.yaw) for p, g in pairs]))
    return ate, ase, aoe


def evaluate_detections(preds: Sequence[Box3D], gts: Sequence[Box3D],
                        cfg: TtcEvalConfig | None = None) -> dict:
    """AP per distance threshold plus TP metrics at the TP threshold."""
    cfg = cfg or TtcEvalConfig()
    matches = match_detections(preds, gts, cfg.distance_thresholds)
    ap = {thr: average_precision(matches[thr], cfg) for thr in cfg.distance_thresholds}
    section = {
        "ap": {str(thr): ap[thr] for thr in cfg.distance_thresholds},
        "mean_ap": float(np.mean(list(ap.values()))) if ap else 0.0,
        "tp_threshold": cfg.tp_threshold,
    }
    tp_match = matches.get(cfg.tp_threshold)
    pairs = [(preds[p], gts[g]) for p, g in tp_match.pairs] if tp_match else []
    if pairs:
        ate, ase, aoe = tp_metrics(pairs)
        section.update({"ate": ate, "ase": ase, "aoe": aoe, "tp_count": len(pairs)})
    else:
        section.update({"ate": None, "ase": None, "aoe": None, "tp_count": 0})
    return section

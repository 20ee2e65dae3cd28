"""Closed-form time-to-contact relations and loss kernels.

Sign convention: positive relative speed means the object is closing,
so approaching objects have positive TTC and receding ones negative.
"""

from __future__ import annotations

import math

from .errors import NonPositiveHeight, UndefinedEta, UndefinedTTC

EPS_SPEED = 1e-3      # m/s below which depth speed gives no TTC
EPS_DEPTH_DELTA = 1e-6  # m below which two depths give no TTC
EPS_RATIO = 1e-6      # looming threshold on |1 - h1/h2|


def ttc_from_depth_speed(z_min: float, v_rel: float) -> float:
    """TTC from the nearest-point depth and the closing speed (Eq-style
    z/v). Negative speed (receding) yields negative TTC."""
    if z_min <= 0:
        raise ValueError(f"z_min must be positive, got {z_min}")
    if abs(v_rel) < EPS_SPEED:
        raise UndefinedTTC(f"|v_rel|={abs(v_rel):.2e} m/s below {EPS_SPEED}")
    return z_min / v_rel


def ttc_from_depths(z1: float, z2: float, dt: float) -> float:
    """TTC referenced to the first sample: dt * z1 / (z1 - z2)."""
    if z1 <= 0 or z2 <= 0:
        raise ValueError("depths must be positive")
    if dt <= 0:
        raise ValueError("dt must be positive")
    if abs(z1 - z2) < EPS_DEPTH_DELTA:
        raise UndefinedTTC(f"|z1-z2|={abs(z1 - z2):.2e} m below {EPS_DEPTH_DELTA}")
    return dt * z1 / (z1 - z2)


def visible_height(fy: float, height_m: float, z: float) -> float:
    """Projected object height in pixels: fy * H / z."""
    if z <= 0:
        raise ValueError("depth must be positive")
    if height_m < 0:
        raise ValueError("object height must be non-negative")
    return fy * height_m / z


def ttc_from_height_ratio(h1: float, h2: float, dt: float) -> float:
    """TTC from two visual heights: dt / (1 - h1/h2).

    Growing objects (h2 > h1, approaching) give positive TTC.
    """
    if h1 <= 0 or h2 <= 0:
        raise ValueError("heights must be positive")
    if dt <= 0:
        raise ValueError("dt must be positive")
    looming = 1.0 - h1 / h2
    if abs(looming) < EPS_RATIO:
        raise UndefinedTTC(f"|1 - h1/h2|={abs(looming):.2e} below {EPS_RATIO}")
    return dt / looming


def eta_from_ttc(tau: float, dt: float) -> float:
    """Motion-in-depth: eta = 1 - dt/tau."""
    if tau == 0.0:
        raise UndefinedEta("tau = 0 has no motion-in-depth")
    return 1.0 - dt / tau


def ttc_from_eta(eta: float, dt: float) -> float:
    """Inverse of eta_from_ttc: tau = dt / (1 - eta)."""
    if eta == 1.0:
        raise UndefinedTTC("eta = 1 corresponds to infinite TTC")
    return dt / (1.0 - eta)


def smooth_l1(pred: float, gt: float) -> tuple[float, float]:
    """Smooth-L1 loss and its derivative w.r.t. the prediction.

    0.5 * d^2 inside |d| < 1, |d| - 0.5 outside, d = gt - pred; the
    derivative is continuous at |d| = 1.
    """
    if not (math.isfinite(pred) and math.isfinite(gt)):
        raise ValueError("inputs must be finite")
    d = gt - pred
    if abs(d) < 1.0:
        return 0.5 * d * d, -d
    return abs(d) - 0.5, -math.copysign(1.0, d)


def height_ratio_loss(pred_h1: float, pred_h2: float,
                      gt_h1: float, gt_h2: float) -> tuple[float, tuple[float, float]]:
    """Absolute log-ratio mismatch of predicted vs true height ratios.

    loss = |ln(pred_h1/pred_h2) - ln(gt_h1/gt_h2)|, with the gradient
    w.r.t. (pred_h1, pred_h2); at loss = 0 the zero subgradient is
    returned. Invariant to common scaling of both predicted heights.
    """
    for name, h in (("pred_h1", pred_h1), ("pred_h2", pred_h2),
                    ("gt_h1", gt_h1), ("gt_h2", gt_h2)):
        if h <= 0:
            raise NonPositiveHeight(f"{name} = {h} must be positive")
    r = math.log(pred_h1 / pred_h2) - math.log(gt_h1 / gt_h2)
    if r == 0.0:
        return 0.0, (0.0, 0.0)
    s = math.copysign(1.0, r)
    return abs(r), (s / pred_h1, -s / pred_h2)

"""Isotropic scale estimation between two feature stacks by normalized
cross-correlation.

The moving stack is warped by a scale factor about a fixed center
(bilinear sampling), a small integer translation search absorbs residual
ROI jitter, and the scale is located by a coarse sweep, golden-section
refinement to the requested tolerance, and a final three-point parabolic
fit. Both stacks are box-smoothed before correlation: thin event bands
produce a correlation peak that is jagged at the sub-cell level, and the
smoothing turns the (dither-quantized) band positions back into a
subpixel-accurate, well-conditioned objective. Hot loops are JIT
compiled; everything runs single threaded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import FlatObjective

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
MIN_PROMINENCE = 0.02
SMOOTH_SIZE = 5  # box filter edge applied to both stacks before correlation


@njit(cache=True, fastmath=True)
def _box_blur(stack, size):
    """Separable box blur with zero-padded borders, matching a uniform
    filter in constant mode."""
    c, h, w = stack.shape
    half = size // 2
    out = np.empty_like(stack)
    tmp = np.empty((h, w), np.float32)
    inv = np.float32(1.0 / size)
    for ch in range(c):
        for y in range(h):
            acc = 0.0
            for x in range(min(half, w)):
                acc += stack[ch, y, x]
            for x in range(w):
                hi = x + half
                if hi < w:
                    acc += stack[ch, y, hi]
                lo = x - half - 1
                if lo >= 0:
                    acc -= stack[ch, y, lo]
                tmp[y, x] = acc * inv
        for x in range(w):
            acc = 0.0
            for y in range(min(half, h)):
                acc += tmp[y, x]
            for y in range(h):
                hi = y + half
                if hi < h:
                    acc += tmp[hi, x]
                lo = y - half - 1
                if lo >= 0:
                    acc -= tmp[lo, x]
                out[ch, y, x] = acc * inv
    return out


@njit(cache=True, fastmath=True)
def _score_fused(ref, mov, cx, cy, gain, dx, dy, margin, step):
    """NCC between ref (shifted by dx, dy) and mov scaled by 1/gain about
    (cx, cy), sampled on a strided lattice. Returns -2.0 when degenerate."""
    c, h, w = ref.shape
    x0s = np.empty(w, np.int64)
    wxs = np.empty(w, np.float64)
    y0s = np.empty(h, np.int64)
    wys = np.empty(h, np.float64)
    for x in range(margin, w - margin, step):
        fx = cx + (x - cx) * gain
        x0 = int(math.floor(fx))
        x0s[x] = x0
        wxs[x] = fx - x0
    for y in range(margin, h - margin, step):
        fy = cy + (y - cy) * gain
        y0 = int(math.floor(fy))
        y0s[y] = y0
        wys[y] = fy - y0
    n = 0
    sa = 0.0
    sb = 0.0
    saa = 0.0
    sbb = 0.0
    sab = 0.0
    for ch in range(c):
        for y in range(margin, h - margin, step):
            y0 = y0s[y]
            wy = wys[y]
            for x in range(margin, w - margin, step):
                x0 = x0s[x]
                if x0 < 0 or x0 >= w - 1 or y0 < 0 or y0 >= h - 1:
                    b = 0.0
                else:
                    wx = wxs[x]
                    top = mov[ch, y0, x0] + (mov[ch, y0, x0 + 1] - mov[ch, y0, x0]) * wx
                    bot = mov[ch, y0 + 1, x0] + (mov[ch, y0 + 1, x0 + 1] - mov[ch, y0 + 1, x0]) * wx
                    b = top + (bot - top) * wy
                a = ref[ch, y + dy, x + dx]
                sa += a
                sb += b
                saa += a * a
                sbb += b * b
                sab += a * b
                n += 1
    if n < 16:
        return -2.0
    va = saa - sa * sa / n
    vb = sbb - sb * sb / n
    if va <= 1e-12 or vb <= 1e-12:
        return -2.0
    return (sab - sa * sb / n) / math.sqrt(va * vb)


@njit(cache=True, fastmath=True)
def _warp_into(mov, cx, cy, gain, out):
    """Scale mov by 1/gain about (cx, cy) into out; off-support reads 0."""
    c, h, w = mov.shape
    x0s = np.empty(w, np.int64)
    wxs = np.empty(w, np.float64)
    y0s = np.empty(h, np.int64)
    wys = np.empty(h, np.float64)
    for x in range(w):
        fx = cx + (x - cx) * gain
        x0 = int(math.floor(fx))
        x0s[x] = x0
        wxs[x] = fx - x0
    for y in range(h):
        fy = cy + (y - cy) * gain
        y0 = int(math.floor(fy))
        y0s[y] = y0
        wys[y] = fy - y0
    for ch in range(c):
        for y in range(h):
            y0 = y0s[y]
            wy = wys[y]
            if y0 < 0 or y0 >= h - 1:
                for x in range(w):
                    out[ch, y, x] = 0.0
                continue
            for x in range(w):
                x0 = x0s[x]
                if x0 < 0 or x0 >= w - 1:
                    out[ch, y, x] = 0.0
                else:
                    wx = wxs[x]
                    top = mov[ch, y0, x0] + (mov[ch, y0, x0 + 1] - mov[ch, y0, x0]) * wx
                    bot = mov[ch, y0 + 1, x0] + (mov[ch, y0 + 1, x0 + 1] - mov[ch, y0 + 1, x0]) * wx
                    out[ch, y, x] = top + (bot - top) * wy


@njit(cache=True, fastmath=True)
def _ncc_shift(ref, buf, dx, dy, margin, step):
    """NCC between ref shifted by (dx, dy) and a pre-warped buffer."""
    c, h, w = ref.shape
    n = 0
    sa = 0.0
    sb = 0.0
    saa = 0.0
    sbb = 0.0
    sab = 0.0
    for ch in range(c):
        for y in range(margin, h - margin, step):
            for x in range(margin, w - margin, step):
                a = ref[ch, y + dy, x + dx]
                b = buf[ch, y, x]
                sa += a
                sb += b
                saa += a * a
                sbb += b * b
                sab += a * b
                n += 1
    if n < 16:
        return -2.0
    va = saa - sa * sa / n
    vb = sbb - sb * sb / n
    if va <= 1e-12 or vb <= 1e-12:
        return -2.0
    return (sab - sa * sb / n) / math.sqrt(va * vb)


@dataclass(frozen=True)
class ScaleMatch:
    """Result of a scale search: the factor by which the moving stack is
    larger than the reference, plus correlation quality measures."""

    scale: float
    ncc: float
    prominence: float
    confidence: float
    shift: tuple[int, int]


def _best_shift(ref, buf, margin, step, max_shift, start, grid: bool = True):
    """Integer shift search: optional coarse grid stage, then a 3x3 hill
    climb from the best candidate."""
    best_dx, best_dy = start
    best = _ncc_shift(ref, buf, best_dx, best_dy, margin, step)
    if grid:
        for dy in range(-max_shift, max_shift + 1, 2):
            for dx in range(-max_shift, max_shift + 1, 2):
                f = _ncc_shift(ref, buf, dx, dy, margin, step)
                if f > best:
                    best, best_dx, best_dy = f, dx, dy
    improved = True
    while improved:
        improved = False
        for dy in (best_dy - 1, best_dy, best_dy + 1):
            for dx in (best_dx - 1, best_dx, best_dx + 1):
                if abs(dx) > max_shift or abs(dy) > max_shift or (dx, dy) == (best_dx, best_dy):
                    continue
                f = _ncc_shift(ref, buf, dx, dy, margin, step)
                if f > best:
                    best, best_dx, best_dy = f, dx, dy
                    improved = True
    return best, (best_dx, best_dy)


def _parabolic_vertex(x1, f1, x2, f2, x3, f3):
    denom = (x2 - x1) * (f2 - f3) - (x2 - x3) * (f2 - f1)
    if abs(denom) < 1e-30:
        return x2
    num = (x2 - x1) ** 2 * (f2 - f3) - (x2 - x3) ** 2 * (f2 - f1)
    return x2 - 0.5 * num / denom


def match_scale(ref_stack: np.ndarray, mov_stack: np.ndarray,
                center: tuple[float, float] | None = None,
                scale_range: tuple[float, float] = (0.5, 2.0),
                max_shift: int = 4,
                tol: float = 1e-4,
                coarse_steps: int = 13,
                search_step: int = 2,
                smooth: int = SMOOTH_SIZE) -> ScaleMatch:
    """Locate the scale of ``mov_stack`` relative to ``ref_stack``.

    Both stacks are (C, H, W); zero is the background level. Bracketing
    phases (coarse sweep, shift search, golden section to ``tol``) run on
    strided sample lattices for speed; the closing parabolic refinement
    runs twice on the full lattice, whose peak is free of stride phase
    bias. Raises FlatObjective when the correlation peak prominence over
    the coarse sweep stays below MIN_PROMINENCE.
    """
    ref = np.ascontiguousarray(ref_stack, dtype=np.float32)
    mov = np.ascontiguousarray(mov_stack, dtype=np.float32)
    if ref.ndim == 2:
        ref = ref[None]
    if mov.ndim == 2:
        mov = mov[None]
    if ref.shape != mov.shape:
        raise ValueError("reference and moving stacks must share one shape")
    _, h, w = ref.shape
    if center is None:
        center = ((w - 1) / 2.0, (h - 1) / 2.0)
    cx, cy = float(center[0]), float(center[1])
    margin = max(max_shift, 1)
    lo, hi = scale_range
    if smooth > 1:
        ref = _box_blur(ref, smooth)
        mov = _box_blur(mov, smooth)
    sweep_step = min(search_step * 2, 4)

    # coarse geometric sweep at zero shift
    scales = np.geomspace(lo, hi, coarse_steps)
    coarse = np.array([
        _score_fused(ref, mov, cx, cy, float(s), 0, 0, margin, sweep_step)
        for s in scales
    ])
    if not np.any(coarse > -2.0):
        raise FlatObjective("no evaluable correlation in the scale range")
    best_i = int(np.argmax(coarse))

    # translation search at the coarse winner
    buf = np.empty_like(mov)
    _warp_into(mov, cx, cy, float(scales[best_i]), buf)
    _, shift = _best_shift(ref, buf, margin, sweep_step, max_shift, (0, 0), grid=True)
    dx, dy = shift

    # golden-section refinement of the scale at the located shift
    a = float(scales[max(best_i - 1, 0)])
    c = float(scales[min(best_i + 1, coarse_steps - 1)])
    if a == c:
        a, c = max(lo, a - tol), min(hi, c + tol)
    x1 = c - (c - a) * GOLDEN
    x2 = a + (c - a) * GOLDEN
    f1 = _score_fused(ref, mov, cx, cy, x1, dx, dy, margin, search_step)
    f2 = _score_fused(ref, mov, cx, cy, x2, dx, dy, margin, search_step)
    it = 0
    while (c - a) > tol:
        if f1 >= f2:
            c, x2, f2 = x2, x1, f1
            x1 = c - (c - a) * GOLDEN
            f1 = _score_fused(ref, mov, cx, cy, x1, dx, dy, margin, search_step)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + (c - a) * GOLDEN
            f2 = _score_fused(ref, mov, cx, cy, x2, dx, dy, margin, search_step)
        it += 1
        if it % 8 == 0:  # shift refresh as the bracket narrows
            _warp_into(mov, cx, cy, (a + c) / 2.0, buf)
            _, new_shift = _best_shift(ref, buf, margin, sweep_step, max_shift,
                                       shift, grid=False)
            if new_shift != shift:
                shift = new_shift
                dx, dy = shift
                f1 = _score_fused(ref, mov, cx, cy, x1, dx, dy, margin, search_step)
                f2 = _score_fused(ref, mov, cx, cy, x2, dx, dy, margin, search_step)
    s_mid = (a + c) / 2.0

    # two passes of three-point parabolic refinement on the full lattice
    best_ncc = -2.0
    for step_h in (max(2e-3, (c - a)), max(5e-4, tol)):
        xs = (max(lo, s_mid - step_h), s_mid, min(hi, s_mid + step_h))
        fs = [_score_fused(ref, mov, cx, cy, float(x), dx, dy, margin, 1) for x in xs]
        vertex = _parabolic_vertex(xs[0], fs[0], xs[1], fs[1], xs[2], fs[2])
        if not (xs[0] <= vertex <= xs[2]) or not math.isfinite(vertex):
            vertex = xs[int(np.argmax(fs))]
        best_ncc = max(best_ncc, max(fs))
        s_mid = float(vertex)

    evaluable = coarse[coarse > -2.0]
    baseline = float(np.median(evaluable))
    prominence = best_ncc - baseline
    if prominence < MIN_PROMINENCE:
        raise FlatObjective(
            f"correlation peak prominence {prominence:.4f} < {MIN_PROMINENCE}")
    confidence = min(1.0, max(0.0, prominence / max(1e-9, 1.0 - baseline)))
    return ScaleMatch(s_mid, float(best_ncc), float(prominence),
                      float(confidence), (dx, dy))


def warm_up() -> None:
    """Trigger JIT compilation so later calls run at full speed."""
    ref = np.zeros((1, 16, 16), np.float32)
    ref[0, 6:10, 6:10] = 1.0
    mov = ref.copy()
    try:
        match_scale(ref, mov, max_shift=1, coarse_steps=5)
    except FlatObjective:
        pass

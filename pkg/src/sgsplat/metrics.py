"""Quality and rate metrics: PSNR, MS-SSIM, Bjontegaard deltas."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .exceptions import ContractViolation, OverlapError

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03


@dataclass(frozen=True)
class RdPoint:
    bpp: float
    quality: float

    def __post_init__(self):
        if not self.bpp > 0:
            raise ContractViolation("bpp must be positive")


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for unit-range images; ``inf`` when identical."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size=WINDOW_SIZE, sigma=WINDOW_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x, win):
    r = win.size // 2
    y = correlate1d(x, win, axis=0, mode="constant")
    y = correlate1d(y, win, axis=1, mode="constant")
    return y[r:x.shape[0] - r, r:x.shape[1] - r]


def ssim_components(x, y, win=None):
    """Mean luminance-contrast-structure SSIM and mean contrast-structure term over valid windows."""
    win = gaussian_window() if win is None else win
    c1 = K1 ** 2
    c2 = K2 ** 2
    mx = _filter_valid(x, win)
    my = _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mx * mx
    syy = _filter_valid(y * y, win) - my * my
    sxy = _filter_valid(x * y, win) - mx * my
    cs = (2.0 * sxy + c2) / (sxx + syy + c2)
    lum = (2.0 * mx * my + c1) / (mx * mx + my * my + c1)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def _downsample(x):
    h, w = x.shape
    x = x[: h - h % 2, : w - w % 2]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim_scales(height, width) -> int:
    m = 0
    side = min(height, width)
    while m < len(MS_SSIM_WEIGHTS) and side >= WINDOW_SIZE:
        m += 1
        side //= 2
    return m


def ms_ssim(a, b, *, return_scales=False):
    """Multi-scale SSIM averaged over channels.

    Uses an 11x11 Gaussian window (sigma 1.5) without padding and 2x2 mean
    pooling between scales. Images shorter than 176 px on a side use fewer
    scales with the leading weights renormalized to sum to one. Negative
    contrast-structure terms are clamped to zero before exponentiation.
    """
    a, b = _pair(a, b)
    h, w = a.shape[:2]
    m = ms_ssim_scales(h, w)
    if m == 0:
        raise ContractViolation(f"image {h}x{w} too small for an {WINDOW_SIZE}x{WINDOW_SIZE} window")
    weights = np.asarray(MS_SSIM_WEIGHTS[:m])
    weights = weights / weights.sum()
    win = gaussian_window()
    vals = []
    for c in range(a.shape[2]):
        x, y = a[:, :, c], b[:, :, c]
        score = 1.0
        for j in range(m):
            s, cs = ssim_components(x, y, win)
            term = s if j == m - 1 else cs
            score *= max(term, 0.0) ** weights[j]
            if j < m - 1:
                x, y = _downsample(x), _downsample(y)
        vals.append(score)
    value = float(np.mean(vals))
    return (value, m) if return_scales else value


def _curve(points):
    pts = [p if isinstance(p, RdPoint) else RdPoint(*p) for p in points]
    if len(pts) < 4:
        raise ContractViolation("Bjontegaard deltas need at least 4 points per curve")
    rate = np.log10([p.bpp for p in pts])
    quality = np.array([p.quality for p in pts], dtype=np.float64)
    if np.unique(quality).size != quality.size:
        raise ContractViolation("quality values must be distinct")
    return rate, quality


def _avg_integral(poly, lo, hi):
    ip = np.polyint(poly)
    return (np.polyval(ip, hi) - np.polyval(ip, lo)) / (hi - lo)


def bd_rate(reference, test) -> float:
    """Average bitrate difference (percent) at equal quality; negative is better.

    Classic cubic fit of log10(bpp) against quality over the overlapping
    quality interval.
    """
    r_ref, q_ref = _curve(reference)
    r_test, q_test = _curve(test)
    lo = max(q_ref.min(), q_test.min())
    hi = min(q_ref.max(), q_test.max())
    if not hi > lo:
        raise OverlapError("the two curves share no quality interval")
    p_ref = np.polyfit(q_ref, r_ref, 3)
    p_test = np.polyfit(q_test, r_test, 3)
    delta = _avg_integral(p_test, lo, hi) - _avg_integral(p_ref, lo, hi)
    return float((10.0 ** delta - 1.0) * 100.0)


def bd_psnr(reference, test) -> float:
    """Average quality difference (dB) at equal rate; positive is better."""
    r_ref, q_ref = _curve(reference)
    r_test, q_test = _curve(test)
    lo = max(r_ref.min(), r_test.min())
    hi = min(r_ref.max(), r_test.max())
    if not hi > lo:
        raise OverlapError("the two curves share no rate interval")
    p_ref = np.polyfit(r_ref, q_ref, 3)
    p_test = np.polyfit(r_test, q_test, 3)
    return float(_avg_integral(p_test, lo, hi) - _avg_integral(p_ref, lo, hi))

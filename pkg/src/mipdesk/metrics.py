"""Image quality metrics.

``avg2`` is the geometric mean of MSE and sqrt(1 - SSIM) only; LPIPS is not
computed, so these numbers are not comparable with three-term averages.
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    avg2: float


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    a, b = _check_pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return float("inf")
    return float(-10.0 * np.log10(mse))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img, win):
    h = len(win) // 2
    out = correlate1d(correlate1d(img, win, axis=0, mode="constant"), win, axis=1, mode="constant")
    return out[h:img.shape[0] - h, h:img.shape[1] - h]


def ssim(a, b):
    """Mean SSIM over valid 11x11 Gaussian windows, averaged over channels."""
    a, b = _check_pair(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    win = gaussian_window()
    vals = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, win), _filter_valid(y, win)
        sxx = _filter_valid(x * x, win) - mx**2
        syy = _filter_valid(y * y, win) - my**2
        sxy = _filter_valid(x * y, win) - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
        den = (mx**2 + my**2 + SSIM_C1) * (sxx + syy + SSIM_C2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def average_metric(psnr_db, ssim_val):
    """sqrt(MSE * sqrt(1 - SSIM)); zero for a perfect match."""
    if ssim_val > 1 + 1e-12:
        raise ValueError(f"SSIM cannot exceed 1, got {ssim_val}")
    mse = 0.0 if np.isinf(psnr_db) else 10.0 ** (-psnr_db / 10.0)
    return float(np.sqrt(mse * np.sqrt(max(0.0, 1.0 - ssim_val))))


def report(a, b):
    p, s = psnr(a, b), ssim(a, b)
    return MetricReport(p, s, average_metric(p, s))


CSV_FIELDS = ("scene", "scale", "method", "psnr", "ssim", "avg2")


def write_csv(path, rows):
    """rows: dicts with the keys in CSV_FIELDS."""
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in CSV_FIELDS})

"""Image quality metrics on the luminance channel."""

from __future__ import annotations

import math

import numpy as np

__all__ = ["LUMA_COEFFS", "rgb_to_luminance", "psnr", "ssim", "gaussian_window", "summarize"]

# ITU-R BT.601 luma
LUMA_COEFFS = (0.299, 0.587, 0.114)


def rgb_to_luminance(img: np.ndarray) -> np.ndarray:
    """(h, w, 3) floats in [0, 1] -> (h, w) luma on the 0..255 scale (float64)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected an (h, w, 3) image, got shape {img.shape}")
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    return 255.0 * (LUMA_COEFFS[0] * r + LUMA_COEFFS[1] * g + LUMA_COEFFS[2] * b)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 255.0) -> float:
    """PSNR in dB; identical inputs return ``math.inf``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes differ {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalised 1-D Gaussian taps."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation along rows then columns
    k = taps.size
    view = np.lib.stride_tricks.sliding_window_view(img, k, axis=0)
    tmp = view @ taps
    view = np.lib.stride_tricks.sliding_window_view(tmp, k, axis=1)
    return view @ taps


def ssim(a: np.ndarray, b: np.ndarray, L: float = 255.0, size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all fully contained 11x11 Gaussian windows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes differ {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < size:
        raise ValueError(f"ssim: need a 2-D plane of at least {size}x{size}, got {a.shape}")
    c1 = (k1 * L) ** 2
    c2 = (k2 * L) ** 2
    taps = gaussian_window(size, sigma)
    mu_a = _filter_valid(a, taps)
    mu_b = _filter_valid(b, taps)
    var_a = _filter_valid(a * a, taps) - mu_a * mu_a
    var_b = _filter_valid(b * b, taps) - mu_b * mu_b
    cov = _filter_valid(a * b, taps) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def summarize(values) -> dict:
    """Finite-value summary: count, mean, min, quartiles, max, and how many were infinite."""
    arr = np.asarray([v for v in values], dtype=np.float64)
    finite = arr[np.isfinite(arr)]
    out = {"count": int(arr.size), "infinite": int(arr.size - finite.size)}
    if finite.size:
        q1, med, q3 = np.percentile(finite, [25, 50, 75])
        out.update(mean=float(finite.mean()), min=float(finite.min()), q1=float(q1),
                   median=float(med), q3=float(q3), max=float(finite.max()))
    else:
        out.update(mean=math.nan, min=math.nan, q1=math.nan, median=math.nan, q3=math.nan, max=math.nan)
    return out

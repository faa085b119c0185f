"""Image-quality metrics and evaluation-pool class ratios.

PSNR returns the 99 dB sentinel instead of infinity once MSE drops below
1e-12, keeping reports serializable. SSIM is the standard Gaussian-window
(11 px, sigma 1.5) formulation on the channel-mean grayscale image,
averaged over valid window positions only.
"""

from __future__ import annotations

import math

import numpy as np

PSNR_CAP_DB = 99.0
_PSNR_MSE_FLOOR = 1e-12

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_shapes(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared difference over all pixels and channels."""
    a, b = _check_shapes(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE), capped at 99 dB when MSE < 1e-12."""
    err = mse(a, b)
    if err < _PSNR_MSE_FLOOR:
        return PSNR_CAP_DB
    return float(min(10.0 * math.log10(peak * peak / err), PSNR_CAP_DB))


def gaussian_kernel(window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 2-D Gaussian window."""
    half = (window - 1) / 2.0
    coords = np.arange(window) - half
    g = np.exp(-(coords**2) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def _to_gray(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3:
        return arr.mean(axis=2)
    if arr.ndim == 2:
        return arr
    raise ValueError(f"expected 2-D or 3-D image, got shape {arr.shape}")


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    window: int = SSIM_WINDOW,
    sigma: float = SSIM_SIGMA,
    k1: float = SSIM_K1,
    k2: float = SSIM_K2,
    peak: float = 1.0,
) -> float:
    ga, gb = _to_gray(a), _to_gray(b)
    if ga.shape != gb.shape:
        raise ValueError(f"shape mismatch: {ga.shape} vs {gb.shape}")
    if min(ga.shape) < window:
        raise ValueError(f"image {ga.shape} smaller than window {window}")
    kern = gaussian_kernel(window, sigma)
    pa = np.lib.stride_tricks.sliding_window_view(ga, (window, window))
    pb = np.lib.stride_tricks.sliding_window_view(gb, (window, window))
    mu_a = np.tensordot(pa, kern, axes=([2, 3], [0, 1]))
    mu_b = np.tensordot(pb, kern, axes=([2, 3], [0, 1]))
    ex_aa = np.tensordot(pa * pa, kern, axes=([2, 3], [0, 1]))
    ex_bb = np.tensordot(pb * pb, kern, axes=([2, 3], [0, 1]))
    ex_ab = np.tensordot(pa * pb, kern, axes=([2, 3], [0, 1]))
    var_a = ex_aa - mu_a * mu_a
    var_b = ex_bb - mu_b * mu_b
    cov = ex_ab - mu_a * mu_b
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def negative_class_ratio(labels) -> float:
    """Fraction of an evaluation pool labeled negative."""
    labels = list(labels)
    if not labels:
        raise ValueError("empty evaluation pool")
    return sum(1 for lab in labels if lab == "negative") / len(labels)


def labels_from_scores(scores, threshold: float = 0.5) -> list[str]:
    """Binary decision labels from classifier scores."""
    return ["positive" if s >= threshold else "negative" for s in scores]

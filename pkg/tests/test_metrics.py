"""Metric oracles: brute-force twins for mse/psnr/ssim, ratio helpers."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from albedoadapt.metrics import (
    PSNR_CAP_DB,
    SSIM_WINDOW,
    gaussian_kernel,
    labels_from_scores,
    mse,
    negative_class_ratio,
    psnr,
    ssim,
)

unit_pairs = st.tuples(
    arrays(np.float64, (6, 5, 3), elements=st.floats(0.0, 1.0, allow_nan=False)),
    arrays(np.float64, (6, 5, 3), elements=st.floats(0.0, 1.0, allow_nan=False)),
)


def mse_bruteforce(a, b):
    """Scalar-loop reference with compensated summation."""
    total = math.fsum(
        (float(x) - float(y)) ** 2 for x, y in zip(a.ravel(), b.ravel())
    )
    return total / a.size


def ssim_bruteforce(a, b, window=SSIM_WINDOW, sigma=1.5, k1=0.01, k2=0.03):
    """Direct per-window implementation of the standard SSIM formula."""
    ga = np.asarray(a, dtype=np.float64).mean(axis=2)
    gb = np.asarray(b, dtype=np.float64).mean(axis=2)
    kern = gaussian_kernel(window, sigma)
    c1, c2 = k1**2, k2**2
    values = []
    for i in range(ga.shape[0] - window + 1):
        for j in range(ga.shape[1] - window + 1):
            wa = ga[i : i + window, j : j + window]
            wb = gb[i : i + window, j : j + window]
            mu_a = float((wa * kern).sum())
            mu_b = float((wb * kern).sum())
            var_a = float((wa * wa * kern).sum()) - mu_a**2
            var_b = float((wb * wb * kern).sum()) - mu_b**2
            cov = float((wa * wb * kern).sum()) - mu_a * mu_b
            num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
            den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
            values.append(num / den)
    return sum(values) / len(values)


# ---------------------------------------------------------------------------
# mse


@given(unit_pairs)
def test_mse_matches_bruteforce(pair):
    a, b = pair
    assert abs(mse(a, b) - mse_bruteforce(a, b)) < 1e-12


def test_mse_basics():
    a = np.zeros((4, 4, 3))
    assert mse(a, a) == 0.0
    assert mse(a, a + 0.5) == pytest.approx(0.25, abs=1e-15)
    with pytest.raises(ValueError):
        mse(a, np.zeros((4, 5, 3)))


# ---------------------------------------------------------------------------
# psnr


@given(unit_pairs)
def test_psnr_matches_formula(pair):
    a, b = pair
    err = mse(a, b)
    if err < 1e-12:
        assert psnr(a, b) == PSNR_CAP_DB
    else:
        assert psnr(a, b) == min(10.0 * math.log10(1.0 / err), PSNR_CAP_DB)


def test_psnr_identical_images_hit_cap():
    a = np.random.default_rng(0).uniform(0, 1, (8, 8, 3))
    assert psnr(a, a) == PSNR_CAP_DB


def test_psnr_respects_peak():
    a = np.zeros((4, 4, 3))
    b = np.full((4, 4, 3), 0.5)
    assert psnr(a, b, peak=2.0) == pytest.approx(psnr(a, b) + 10 * math.log10(4.0))


# ---------------------------------------------------------------------------
# ssim


def test_ssim_matches_bruteforce():
    rng = np.random.default_rng(42)
    for _ in range(3):
        a = rng.uniform(0, 1, (16, 16, 3))
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
        assert abs(ssim(a, b) - ssim_bruteforce(a, b)) < 1e-6


def test_ssim_self_similarity_is_one():
    a = np.random.default_rng(1).uniform(0, 1, (16, 16, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)


def test_ssim_penalizes_distortion_more_with_magnitude():
    rng = np.random.default_rng(2)
    a = rng.uniform(0.2, 0.8, (16, 16, 3))
    mild = np.clip(a + rng.normal(0, 0.02, a.shape), 0, 1)
    harsh = np.clip(a + rng.normal(0, 0.3, a.shape), 0, 1)
    assert ssim(a, harsh) < ssim(a, mild) < 1.0


def test_ssim_rejects_small_images_and_mismatch():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))
    with pytest.raises(ValueError):
        ssim(np.zeros((16, 16, 3)), np.zeros((16, 17, 3)))


def test_gaussian_kernel_normalized_and_symmetric():
    k = gaussian_kernel()
    assert k.shape == (SSIM_WINDOW, SSIM_WINDOW)
    assert k.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(k, k.T)
    assert np.allclose(k, k[::-1, ::-1])
    assert k[5, 5] == k.max()


# ---------------------------------------------------------------------------
# pool ratios


def test_negative_class_ratio():
    labels = ["negative", "positive", "negative", "ambiguous"]
    assert negative_class_ratio(labels) == 0.5
    assert negative_class_ratio(iter(labels)) == 0.5
    with pytest.raises(ValueError):
        negative_class_ratio([])


def test_labels_from_scores_threshold_is_inclusive():
    assert labels_from_scores([0.4, 0.5, 0.6]) == ["negative", "positive", "positive"]
    assert labels_from_scores([0.4, 0.5, 0.6], threshold=0.6) == [
        "negative",
        "negative",
        "positive",
    ]

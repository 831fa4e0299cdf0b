import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scoreflow.metrics import PSNR_CAP, MetricError, psnr, report, ssim, ssim_map


def naive_ssim(a, b, data_range=1.0, size=11, sigma=1.5):
    """Direct per-pixel window loop with symmetric (edge-repeating) reflection."""
    half = size // 2
    g = [math.exp(-0.5 * ((k - half) / sigma) ** 2) for k in range(size)]
    tot = sum(g)
    w = np.outer(g, g) / (tot * tot)
    pa = np.pad(a, half, mode="symmetric")
    pb = np.pad(b, half, mode="symmetric")
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    vals = []
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            wa = pa[i:i + size, j:j + size]
            wb = pb[i:i + size, j:j + size]
            ma, mb = np.sum(w * wa), np.sum(w * wb)
            va = np.sum(w * (wa - ma) ** 2)
            vb = np.sum(w * (wb - mb) ** 2)
            cov = np.sum(w * (wa - ma) * (wb - mb))
            vals.append((2 * ma * mb + c1) * (2 * cov + c2)
                        / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_ssim_matches_naive_reference(rng):
    for _ in range(3):
        a = rng.random((32, 32))
        b = np.clip(a + 0.2 * rng.standard_normal((32, 32)), 0, 1)
        assert abs(ssim(a, b) - naive_ssim(a, b)) < 1e-8
    a, b = rng.random((20, 27)), rng.random((20, 27))
    assert abs(ssim(a, b, 2.0) - naive_ssim(a, b, 2.0)) < 1e-8


def test_ssim_identity_is_exact(rng):
    for _ in range(5):
        x = rng.random((32, 32))
        assert ssim(x, x) == 1.0
    assert ssim(np.zeros((16, 16)), np.zeros((16, 16))) == 1.0


def test_ssim_constant_images():
    c1 = 0.01 ** 2
    val = ssim(np.zeros((16, 16)), np.ones((16, 16)))
    assert val == pytest.approx(c1 / (1 + c1), rel=1e-12)


def test_ssim_errors():
    with pytest.raises(MetricError):
        ssim(np.zeros((10, 32)), np.zeros((10, 32)))
    with pytest.raises(MetricError):
        ssim(np.zeros((16, 16)), np.zeros((16, 17)))
    with pytest.raises(MetricError):
        ssim_map(np.zeros((16, 16, 2)), np.zeros((16, 16, 2)))


@given(arrays(np.float64, (12, 12), elements=st.floats(0, 1)),
       arrays(np.float64, (12, 12), elements=st.floats(0, 1)))
def test_ssim_symmetric_and_bounded(a, b):
    s = ssim(a, b)
    assert s == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1.0 - 1e-9 <= s <= 1.0 + 1e-9


def test_psnr_cap_and_closed_form(rng):
    x = rng.random((8, 8))
    assert psnr(x, x) == PSNR_CAP
    for seed in range(5):
        base = np.random.default_rng(seed).random((32, 32)) * 0.9
        assert psnr(base, base + 0.1) == 20.0
    assert psnr(np.zeros(4), np.full(4, 0.25), data_range=2.5) == 20.0


def test_psnr_matches_brute_force_mse(rng):
    a, b = rng.random((9, 7)), rng.random((9, 7))
    total = 0.0
    for i in range(9):
        for j in range(7):
            total += (a[i, j] - b[i, j]) ** 2
    ref = 10 * math.log10(4.0 / (total / 63))
    assert psnr(a, b, 2.0) == pytest.approx(ref, rel=1e-13)
    assert psnr(a, b, 2.0) == psnr(b, a, 2.0)


def test_psnr_errors():
    with pytest.raises(MetricError):
        psnr(np.zeros(3), np.zeros(4))
    with pytest.raises(MetricError):
        psnr(np.zeros(3), np.ones(3), data_range=0)


def test_noise_amplitude_monotonicity(rng):
    target = rng.random((32, 32))
    z = rng.standard_normal((32, 32))
    amps = [0.01, 0.03, 0.1, 0.3]
    p = [psnr(target, target + a * z) for a in amps]
    assert all(x > y for x, y in zip(p, p[1:]))
    s_mean = [np.mean([ssim(target, target + a * rng.standard_normal((32, 32)))
                       for _ in range(5)]) for a in amps]
    assert all(x >= y for x, y in zip(s_mean, s_mean[1:]))


def test_report_bundles_values(rng):
    a, b = rng.random((16, 16)), rng.random((16, 16))
    r = report(a, b)
    assert (r.ssim, r.psnr_db, r.data_range) == (ssim(a, b), psnr(a, b), 1.0)

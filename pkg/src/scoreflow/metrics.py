"""PSNR and Gaussian-window SSIM for 2-D images."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

PSNR_CAP = 99.0
WIN_SIZE = 11
WIN_SIGMA = 1.5
K1, K2 = 0.01, 0.03


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricReport:
    ssim: float
    psnr_db: float
    data_range: float


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 dB for identical inputs."""
    a, b = _pair(a, b)
    if not data_range > 0:
        raise MetricError("data_range must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(data_range ** 2 / mse)))


def gaussian_window(size: int = WIN_SIZE, sigma: float = WIN_SIGMA) -> np.ndarray:
    """Normalised 1-D Gaussian taps."""
    r = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-0.5 * (r / sigma) ** 2)
    return w / w.sum()


def _filter(img, w):
    out = ndimage.correlate1d(img, w, axis=0, mode="reflect")
    return ndimage.correlate1d(out, w, axis=1, mode="reflect")


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise MetricError("SSIM is defined for 2-D images only")
    if min(a.shape) < WIN_SIZE:
        raise MetricError(f"image side {min(a.shape)} smaller than window {WIN_SIZE}")
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    w = gaussian_window()
    mu_a, mu_b = _filter(a, w), _filter(b, w)
    var_a = _filter(a * a, w) - mu_a ** 2
    var_b = _filter(b * b, w) - mu_b ** 2
    cov = _filter(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over all window centres (11x11 Gaussian, sigma 1.5, reflect borders)."""
    return float(np.mean(ssim_map(a, b, data_range)))


def report(a, b, data_range: float = 1.0) -> MetricReport:
    return MetricReport(ssim(a, b, data_range), psnr(a, b, data_range), data_range)

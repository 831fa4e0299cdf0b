"""Monte-Carlo replicate ensembles: mean sample, std map and scalar uncertainty."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import metrics


class EnsembleError(RuntimeError):
    def __init__(self, replicate, cause):
        super().__init__(f"replicate {replicate} failed: {cause}")
        self.replicate = replicate


@dataclass
class McEnsemble:
    replicates: np.ndarray     # (K, ...)
    mean: np.ndarray
    std: np.ndarray            # population std (divide by K)
    mean_uncertainty: float
    seconds: float = 0.0

    @property
    def K(self) -> int:
        return self.replicates.shape[0]

    @classmethod
    def from_replicates(cls, replicates, seconds: float = 0.0) -> "McEnsemble":
        reps = np.asarray(replicates, dtype=np.float64)
        # shifting by the first replicate keeps identical replicates exact
        mean = reps[0] + np.mean(reps - reps[0], axis=0)
        std = population_std(reps)
        return cls(reps, mean, std, float(std.mean()), seconds)

    def select(self, index) -> "McEnsemble":
        """Sub-ensemble for one condition of a batched ensemble (K, n, ...)."""
        return McEnsemble.from_replicates(self.replicates[:, index], self.seconds)

    def reshape(self, shape) -> "McEnsemble":
        return McEnsemble.from_replicates(
            self.replicates.reshape((self.K,) + tuple(shape)), self.seconds)


def population_std(reps) -> np.ndarray:
    """Divide-by-K standard deviation along axis 0 from pairwise differences.

    sqrt(sum_{i<j} (x_i - x_j)^2) / K, with differences scaled by the largest
    deviation from the first replicate so nothing under- or overflows. Two
    replicates give exactly |a - b| / 2.
    """
    reps = np.asarray(reps, dtype=np.float64)
    K = reps.shape[0]
    scale = np.max(np.abs(reps - reps[0]), axis=0)
    safe = np.where(scale > 0, scale, 1.0)
    acc = np.zeros(reps.shape[1:])
    for i in range(K - 1):
        d = (reps[i + 1:] - reps[i]) / safe
        acc += np.sum(d * d, axis=0)
    return np.where(scale > 0, scale * np.sqrt(acc) / K, 0.0)


def population_variance(reps) -> np.ndarray:
    return population_std(reps) ** 2


def mc_ensemble(invoke: Callable[[int], np.ndarray], K: int = 10, base_seed: int = 0) -> McEnsemble:
    """Run ``invoke(base_seed + k)`` for k = 0..K-1 and summarise the replicates."""
    if K < 1:
        raise ValueError("K must be >= 1")
    reps = []
    t0 = time.perf_counter()
    for k in range(K):
        try:
            out = np.asarray(invoke(base_seed + k), dtype=np.float64)
        except Exception as exc:  # surfaced with the replicate index
            raise EnsembleError(k, exc) from exc
        if not np.all(np.isfinite(out)):
            raise EnsembleError(k, "non-finite output")
        reps.append(out)
    return McEnsemble.from_replicates(np.stack(reps), time.perf_counter() - t0)


@dataclass
class EnsembleScores:
    ssim_mean: float
    psnr_mean: float
    ssim_replicates: np.ndarray
    psnr_replicates: np.ndarray


def ensemble_metrics(e: McEnsemble, target, data_range: float = 1.0) -> EnsembleScores:
    """SSIM/PSNR of the ensemble mean and of every replicate against ``target``."""
    target = np.asarray(target, dtype=np.float64)
    if e.mean.shape != target.shape:
        raise metrics.MetricError(f"shape mismatch: {e.mean.shape} vs {target.shape}")
    return EnsembleScores(
        metrics.ssim(e.mean, target, data_range),
        metrics.psnr(e.mean, target, data_range),
        np.array([metrics.ssim(r, target, data_range) for r in e.replicates]),
        np.array([metrics.psnr(r, target, data_range) for r in e.replicates]),
    )

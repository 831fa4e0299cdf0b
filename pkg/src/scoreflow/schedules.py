"""Noise schedules for the discrete DDPM chain and the continuous VE-SDE.

Discrete step indices run ``t = 1..T``; arrays are stored 0-based so the
value for step ``t`` lives at ``arr[t - 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ScheduleError(ValueError):
    """Raised for invalid schedule parameters or out-of-range time indices."""


@dataclass(frozen=True)
class DiscreteSchedule:
    """Precomputed beta / alpha / alpha-bar ladder of the forward chain."""

    betas: np.ndarray
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)
    posterior_betas: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64).copy()
        if betas.ndim != 1 or betas.size == 0:
            raise ScheduleError("betas must be a non-empty 1-D array")
        if np.any(betas < 0.0) or np.any(betas >= 1.0):
            raise ScheduleError("betas must lie in [0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        prev = np.concatenate([[1.0], alpha_bars[:-1]])
        with np.errstate(divide="ignore", invalid="ignore"):
            post = np.where(1.0 - alpha_bars > 0.0, (1.0 - prev) / (1.0 - alpha_bars) * betas, 0.0)
        for name, arr in (("betas", betas), ("alphas", alphas),
                          ("alpha_bars", alpha_bars), ("posterior_betas", post)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def alpha_bar_prev(self, t: int) -> float:
        """alpha-bar at step ``t - 1`` with the convention alpha-bar_0 = 1."""
        self._check_t(t)
        return 1.0 if t == 1 else float(self.alpha_bars[t - 2])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ScheduleError(f"step index {t} outside 1..{self.T}")


def linear_beta_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiscreteSchedule:
    """Betas interpolated linearly from ``beta_start`` (t=1) to ``beta_end`` (t=T)."""
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return DiscreteSchedule(np.linspace(beta_start, beta_end, int(T)))


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise ScheduleError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def forward_step(s: DiscreteSchedule, x_prev, t: int, eps):
    """One Markov noising step: sqrt(1 - beta_t) x_prev + sqrt(beta_t) eps."""
    s._check_t(t)
    _check_shapes(x_prev, eps)
    beta = s.betas[t - 1]
    return np.sqrt(1.0 - beta) * np.asarray(x_prev) + np.sqrt(beta) * np.asarray(eps)


def forward_marginal(s: DiscreteSchedule, x0, t: int, eps):
    """Closed-form sample of x_t given x_0."""
    s._check_t(t)
    _check_shapes(x0, eps)
    ab = s.alpha_bars[t - 1]
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def posterior_params(s: DiscreteSchedule, x0, xt, t: int):
    """Mean and variance of q(x_{t-1} | x_t, x_0).

    Returns
    -------
    mu_tilde : ndarray
    beta_tilde : float
    """
    s._check_t(t)
    _check_shapes(x0, xt)
    ab = s.alpha_bars[t - 1]
    ab_prev = s.alpha_bar_prev(t)
    beta = s.betas[t - 1]
    coef_x0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
    coef_xt = np.sqrt(s.alphas[t - 1]) * (1.0 - ab_prev) / (1.0 - ab)
    mu = coef_x0 * np.asarray(x0) + coef_xt * np.asarray(xt)
    return mu, float(s.posterior_betas[t - 1])


@dataclass(frozen=True)
class VeSchedule:
    """Variance-exploding noise law with diffusion g(t) = sigma_base**t."""

    sigma_base: float = 25.0
    t_min: float = 0.0
    t_max: float = 1.0

    def __post_init__(self):
        if not self.sigma_base > 1.0:
            raise ScheduleError(f"sigma_base must exceed 1, got {self.sigma_base}")
        if not 0.0 <= self.t_min < self.t_max:
            raise ScheduleError(f"need 0 <= t_min < t_max, got {self.t_min}, {self.t_max}")

    def g(self, t):
        return self.sigma_base ** np.asarray(t, dtype=np.float64)

    def g2(self, t):
        return self.sigma_base ** (2.0 * np.asarray(t, dtype=np.float64))

    def grid(self, n: int) -> np.ndarray:
        """Times t_i = i * t_max / n for i = 0..n."""
        return np.arange(n + 1) * (self.t_max / n)


def ve_sigma(v: VeSchedule, t):
    """Marginal standard deviation sigma(t) = sqrt((b^(2t) - 1) / (2 ln b)).

    Accepts a scalar or an array of times; sigma(0) is exactly 0.
    """
    ta = np.asarray(t, dtype=np.float64)
    if np.any(ta < 0.0) or np.any(ta > v.t_max * (1.0 + 1e-12)):
        raise ScheduleError(f"time outside [0, {v.t_max}]")
    # expm1 keeps relative accuracy for small t
    out = np.sqrt(np.expm1(2.0 * ta * np.log(v.sigma_base)) / (2.0 * np.log(v.sigma_base)))
    out = np.where(ta == 0.0, 0.0, out)
    return float(out) if out.ndim == 0 else out


def ve_marginal(v: VeSchedule, x0, t: float, eps):
    """x(t) = x(0) + sigma(t) eps.

    ``t`` may be a scalar or one time per leading-axis row of ``x0``.
    """
    _check_shapes(x0, eps)
    x0 = np.asarray(x0, dtype=np.float64)
    sig = np.asarray(ve_sigma(v, t))
    sig = sig.reshape(sig.shape + (1,) * (x0.ndim - sig.ndim))
    return x0 + sig * np.asarray(eps)

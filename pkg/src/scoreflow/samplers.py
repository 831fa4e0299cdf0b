"""Reverse-time samplers: ancestral DDPM, Euler-Maruyama, predictor-corrector,
and the probability-flow ODE integrated with an adaptive Dormand-Prince pair.

All samplers work on a batch ``x`` of shape (n, d) and take the condition
``y`` as (n, dy), (dy,) or ``None``. Noise comes from a counter-based
:class:`NoiseSource` so every draw is addressed by (seed, stream, step).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .schedules import DiscreteSchedule, VeSchedule, ve_sigma

log = logging.getLogger(__name__)

PRIOR, PREDICT, CORRECT = 0, 1, 2
_MASK64 = (1 << 64) - 1


class SamplerDivergence(RuntimeError):
    def __init__(self, method, step):
        super().__init__(f"{method} sampler produced non-finite state at step {step}")
        self.step = step


class StiffnessError(RuntimeError):
    pass


class NoiseSource:
    """Standard-normal draws keyed by (seed, stream, step) through Philox."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)

    def normal(self, stream: int, step: int, shape) -> np.ndarray:
        key = np.array([self.seed & _MASK64, stream], dtype=np.uint64)
        counter = np.array([0, 0, 0, step], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=counter)).standard_normal(shape)


class ZeroNoise(NoiseSource):
    """Test hook: every draw is exactly zero."""

    def normal(self, stream, step, shape):
        return np.zeros(shape)


def as_noise(rng) -> NoiseSource:
    return rng if isinstance(rng, NoiseSource) else NoiseSource(int(rng))


@dataclass
class SamplerConfig:
    n_steps: int = 1000
    pc_prediction_steps: int = 500
    pc_corrector_steps: int = 1
    snr: float = 0.16
    ode_rtol: float = 1e-5
    ode_atol: float = 1e-5
    t_eps: float = 1e-3
    record_every: int = 0

    def __post_init__(self):
        if self.n_steps < 1 or self.pc_prediction_steps < 1:
            raise ValueError("step counts must be >= 1")
        if self.pc_corrector_steps < 0:
            raise ValueError("corrector steps must be >= 0")
        if not self.snr > 0 or not self.ode_rtol > 0 or not self.ode_atol > 0:
            raise ValueError("snr and ODE tolerances must be positive")


@dataclass
class Trajectory:
    """Recorded intermediate states plus evaluation accounting."""

    indices: list = field(default_factory=list)
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    n_evals: int = 0
    skipped_corrections: int = 0
    accepted_steps: int = 0
    rejected_steps: int = 0

    def record(self, every, i, t, x):
        if every and i % every == 0:
            self.indices.append(int(i))
            self.times.append(float(t))
            self.states.append(np.array(x, copy=True))


def _start(shape, x_init, noise, scale):
    if x_init is not None:
        return np.array(x_init, dtype=np.float64, copy=True)
    return scale * noise.normal(PRIOR, 0, shape)


def _check(x, method, step, total):
    if not np.all(np.isfinite(x)):
        raise SamplerDivergence(method, step)
    done = total - step + 1
    if done % max(1, total // 10) == 0:
        log.info("step %d of %d", done, total)


def ddpm_ancestral(eps_model, s: DiscreteSchedule, y, rng, cfg: SamplerConfig = None,
                   shape=None, x_init=None):
    """Ancestral sampling with reverse variance beta-tilde.

    ``eps_model(x, y, t)`` takes integer steps t = T..1. Returns (x0, Trajectory).
    """
    cfg = cfg or SamplerConfig()
    noise = as_noise(rng)
    x = _start(shape, x_init, noise, 1.0)
    tr = Trajectory()
    T = s.T
    inv_sqrt_a = 1.0 / np.sqrt(s.alphas)
    eps_coef = (1.0 - s.alphas) / np.sqrt(1.0 - s.alpha_bars) * inv_sqrt_a
    sigma = np.sqrt(s.posterior_betas)
    tr.record(cfg.record_every, T, T, x)
    for i in range(T, 0, -1):
        eps = eps_model(x, y, i)
        tr.n_evals += 1
        x = inv_sqrt_a[i - 1] * x - eps_coef[i - 1] * eps
        if i > 1:
            x += sigma[i - 1] * noise.normal(PREDICT, i, x.shape)
        _check(x, "ddpm", i, T)
        tr.record(cfg.record_every, i - 1, i - 1, x)
    return x, tr


def _em_update(score_field, v, x, y, t, dt, z):
    s = score_field(x, y, t)
    return x + v.g2(t) * s * dt + v.g(t) * np.sqrt(dt) * z


def em_reverse(score_field, v: VeSchedule, y, rng, cfg: SamplerConfig = None,
               shape=None, x_init=None):
    """Euler-Maruyama on the reverse VE SDE over t_i = i * t_max / N."""
    cfg = cfg or SamplerConfig()
    noise = as_noise(rng)
    N = cfg.n_steps
    dt = v.t_max / N
    x = _start(shape, x_init, noise, ve_sigma(v, v.t_max))
    tr = Trajectory()
    tr.record(cfg.record_every, N, v.t_max, x)
    for i in range(N, 0, -1):
        t = i * dt
        x = _em_update(score_field, v, x, y, t, dt, noise.normal(PREDICT, i, x.shape))
        tr.n_evals += 1
        _check(x, "em", i, N)
        tr.record(cfg.record_every, i - 1, (i - 1) * dt, x)
    return x, tr


def langevin_gamma(r: float, z, s) -> float:
    """Langevin step size (r ||z||)^2 / ||s||^2; NaN when the score vanishes.

    For a batch the norms are averaged over samples first, which keeps the
    step bounded in low dimension where a single ||s|| can be near zero.
    """
    zn = np.mean(np.linalg.norm(np.atleast_2d(z), axis=1))
    sn = np.mean(np.linalg.norm(np.atleast_2d(s), axis=1))
    if sn == 0.0:
        return float("nan")
    return float((r * zn) ** 2 / sn ** 2)


def langevin_corrector(score_field, x, y, t, r: float, M: int, rng, step: int = 0):
    """M annealed-Langevin iterations at fixed time t.

    Returns (x, n_skipped); an iteration is skipped when the score is zero.
    """
    noise = as_noise(rng)
    x = np.atleast_2d(np.array(x, dtype=np.float64, copy=True))
    skipped = 0
    for j in range(M):
        z = noise.normal(CORRECT, step * max(M, 1) + j, x.shape)
        s = np.atleast_2d(score_field(x, y, t))
        gamma = langevin_gamma(r, z, s)
        if not np.isfinite(gamma):
            skipped += 1
            continue
        x = x + 0.5 * gamma * s + np.sqrt(gamma) * z
    return x, skipped


def pc_sample(score_field, v: VeSchedule, y, rng, cfg: SamplerConfig = None,
              shape=None, x_init=None):
    """EM predictor followed by M Langevin corrector iterations per step."""
    cfg = cfg or SamplerConfig()
    noise = as_noise(rng)
    N, M = cfg.pc_prediction_steps, cfg.pc_corrector_steps
    dt = v.t_max / N
    x = _start(shape, x_init, noise, ve_sigma(v, v.t_max))
    tr = Trajectory()
    tr.record(cfg.record_every, N, v.t_max, x)
    for i in range(N, 0, -1):
        t = i * dt
        z = noise.normal(PREDICT, i, x.shape) if i > 1 else np.zeros_like(x)
        x = _em_update(score_field, v, x, y, t, dt, z)
        tr.n_evals += 1
        if M:
            t_corr = max((i - 1) * dt, cfg.t_eps)
            x, skipped = langevin_corrector(score_field, x, y, t_corr, cfg.snr, M, noise, step=i)
            tr.n_evals += M
            tr.skipped_corrections += skipped
        _check(x, "pc", i, N)
        tr.record(cfg.record_every, i - 1, (i - 1) * dt, x)
    return x, tr


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4)

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


@dataclass
class RK45Result:
    x: np.ndarray
    accepted: int
    rejected: int
    n_evals: int


def _initial_step(f, t0, x0, f0, direction, span, rtol, atol):
    scale = atol + rtol * np.abs(x0)
    d0 = np.max(np.abs(x0) / scale)
    d1 = np.max(np.abs(f0) / scale)
    if d1 <= 1e-15:
        h0 = span
    elif d0 < 1e-5 or d1 < 1e-5:
        h0 = min(span, 1e-6)
    else:
        h0 = min(span, 0.01 * d0 / d1)
    f1 = f(t0 + direction * h0, x0 + direction * h0 * f0)
    d2 = np.max(np.abs(f1 - f0) / scale) / h0
    dmax = max(d1, d2)
    h1 = span if dmax <= 1e-15 else (0.01 / dmax) ** 0.2
    return min(100 * h0, h1, span)


def rk45(f: Callable, t_start: float, t_end: float, x_init, rtol: float = 1e-5,
         atol: float = 1e-5, max_steps: int = 100000) -> RK45Result:
    """Adaptive Dormand-Prince integration of dx/dt = f(t, x).

    The fifth-order solution is propagated and the embedded fourth-order
    solution supplies the local error estimate. Works for t_end < t_start.
    """
    if t_start == t_end:
        raise ValueError("t_start and t_end must differ")
    if not rtol > 0 or not atol > 0:
        raise ValueError("tolerances must be positive")
    x = np.array(x_init, dtype=np.float64, copy=True)
    direction = 1.0 if t_end > t_start else -1.0
    span = abs(t_end - t_start)
    t = float(t_start)
    k = [None] * 7
    k[0] = f(t, x)
    n_evals = 1
    h = _initial_step(f, t, x, k[0], direction, span, rtol, atol)
    n_evals += 1
    accepted = rejected = 0
    while direction * (t_end - t) > 0:
        if accepted + rejected >= max_steps:
            raise StiffnessError(f"exceeded {max_steps} steps at t={t}")
        if h < 1e-12 * span:
            raise StiffnessError(f"step size underflow at t={t}")
        remaining = abs(t_end - t)
        last = h >= remaining
        if last:
            h = remaining
        hs = direction * h
        for i in range(1, 7):
            acc = x + hs * sum(a * kk for a, kk in zip(_A[i], k[:i]) if a != 0.0)
            k[i] = f(t + _C[i] * hs, acc)
        n_evals += 6
        x_new = acc  # stage 7 is evaluated at the fifth-order solution
        err = hs * sum(e * kk for e, kk in zip(_E, k) if e != 0.0)
        scale = atol + rtol * np.maximum(np.abs(x), np.abs(x_new))
        ratio = float(np.max(np.abs(err) / scale))
        if ratio <= 1.0:
            accepted += 1
            t = t_end if last else t + hs
            x = x_new
            k[0] = k[6]
            factor = 5.0 if ratio == 0.0 else min(5.0, max(0.2, 0.9 * ratio ** -0.2))
            h = h * factor
        else:
            rejected += 1
            h = h * max(0.2, 0.9 * ratio ** -0.2)
    return RK45Result(x, accepted, rejected, n_evals)


def ode_sample(score_field, v: VeSchedule, y, rng, cfg: SamplerConfig = None,
               shape=None, x_init=None):
    """Probability-flow ODE dx/dt = -1/2 g(t)^2 s(x, y, t), from t_max to t_eps."""
    cfg = cfg or SamplerConfig()
    noise = as_noise(rng)
    x = _start(shape, x_init, noise, ve_sigma(v, v.t_max))
    tr = Trajectory()

    def drift(t, xx):
        return -0.5 * v.g2(t) * score_field(xx, y, t)

    N = cfg.n_steps
    if cfg.record_every:
        marks = [i for i in range(N, -1, -1) if i % cfg.record_every == 0 or i in (N, 0)]
    else:
        marks = [N, 0]
    times = [max(i * v.t_max / N, cfg.t_eps) for i in marks]
    tr.record(cfg.record_every, marks[0], times[0], x)
    for i, t0, t1 in zip(marks[1:], times[:-1], times[1:]):
        if t1 < t0:
            res = rk45(drift, t0, t1, x, cfg.ode_rtol, cfg.ode_atol)
            x = res.x
            tr.n_evals += res.n_evals
            tr.accepted_steps += res.accepted
            tr.rejected_steps += res.rejected
        _check(x, "ode", i, N)
        tr.record(cfg.record_every, i, t1, x)
    return x, tr


METHODS = ("ddpm", "em", "pc", "ode")
_RUNNERS = {"ddpm": ddpm_ancestral, "em": em_reverse, "pc": pc_sample, "ode": ode_sample}


def run_sampler(method: str, field, schedule, y, rng, cfg: SamplerConfig = None,
                shape=None, x_init=None):
    """Dispatch by method name; ``schedule`` is discrete for ddpm, VE otherwise."""
    if method not in _RUNNERS:
        raise ValueError(f"unknown sampling method {method!r}")
    want = DiscreteSchedule if method == "ddpm" else VeSchedule
    if not isinstance(schedule, want):
        raise ValueError(f"method {method!r} needs a {want.__name__}")
    return _RUNNERS[method](field, schedule, y, rng, cfg, shape=shape, x_init=x_init)

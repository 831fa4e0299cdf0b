"""Training objectives, Adam, and the plateau-stopped training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .schedules import DiscreteSchedule, VeSchedule, ve_sigma
from .scores import MlpDenoiser, ddpm_eps, head_backprop, ve_head

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, msg, epoch=None):
        super().__init__(msg if epoch is None else f"{msg} (epoch {epoch})")
        self.epoch = epoch


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 2
    min_epochs: int = 100
    plateau_window: int = 20
    plateau_threshold: float = 0.01
    max_epochs: int = 2000
    t_eps: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "adam_eps", "batch_size", "min_epochs",
                     "plateau_window", "max_epochs", "t_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.adam_beta1 < 1.0 or not 0.0 < self.adam_beta2 < 1.0:
            raise ValueError("Adam betas must lie in (0, 1)")
        if not 0.0 < self.plateau_threshold < 1.0:
            raise ValueError("plateau_threshold must lie in (0, 1)")


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


@dataclass
class LossCurve:
    losses: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def __len__(self):
        return len(self.losses)


def adam_step(state: AdamState, params: list, grads: list, cfg: TrainConfig):
    """Bias-corrected Adam update, applied to ``params`` in place.

    Returns ``(params, state)`` for convenience.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return params, state


def _check_batch(x0):
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if x0.shape[0] == 0:
        raise TrainingError("empty batch")
    return x0


def _squared_error(pred, target, model, tape):
    diff = pred - target
    n = diff.shape[0]
    loss = float(np.sum(diff * diff) / n)
    grads = None
    if tape is not None:
        grads = head_backprop(model, tape, 2.0 * diff / n)
    return loss, grads


def ddpm_loss_at(m, s: DiscreteSchedule, x0, y, t, eps):
    """Simplified DDPM loss for fixed step indices ``t`` and noise ``eps``.

    ``m`` is an MlpDenoiser (gradients returned) or any callable
    ``m(x_t, y, t) -> eps_hat`` (gradients ``None``).
    """
    x0 = _check_batch(x0)
    t = np.asarray(t)
    ab = s.alpha_bars[t - 1][:, None]
    xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    if isinstance(m, MlpDenoiser):
        pred, tape = ddpm_eps(m, s, xt, y, t, tape=True)
    else:
        pred, tape = np.asarray(m(xt, y, t)), None
    return _squared_error(pred, eps, m, tape)


def ddpm_loss(m, s: DiscreteSchedule, x0, y, rng):
    """Draw t ~ U{1..T} and eps ~ N(0, I) per pair, return (loss, grads)."""
    x0 = _check_batch(x0)
    t = rng.integers(1, s.T + 1, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    return ddpm_loss_at(m, s, x0, y, t, eps)


def dsm_ve_loss_at(m, v: VeSchedule, x0, y, t, eps):
    """VE denoising score matching loss ``mean ||head(x(t), y, t) + eps||^2``."""
    x0 = _check_batch(x0)
    t = np.asarray(t, dtype=np.float64)
    xt = x0 + ve_sigma(v, t)[:, None] * eps
    if isinstance(m, MlpDenoiser):
        pred, tape = ve_head(m, v, xt, y, t, tape=True)
    else:
        pred, tape = np.asarray(m(xt, y, t)), None
    return _squared_error(pred, -eps, m, tape)


def dsm_ve_loss(m, v: VeSchedule, x0, y, rng, t_eps: float = 1e-3):
    """Draw t ~ U[t_eps, t_max] and eps ~ N(0, I) per pair, return (loss, grads)."""
    x0 = _check_batch(x0)
    t = rng.uniform(t_eps, v.t_max, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    return dsm_ve_loss_at(m, v, x0, y, t, eps)


def vlb_LT(s: DiscreteSchedule, x0) -> float:
    """KL( q(x_T | x_0) || N(0, I) ) in closed form."""
    x0 = np.asarray(x0, dtype=np.float64)
    ab = float(s.alpha_bars[-1])
    per_dim = ab * x0 * x0 - ab - np.log1p(-ab)
    return float(0.5 * np.sum(per_dim))


def plateaued(losses, cfg: TrainConfig) -> bool:
    """True when the latest epoch failed to improve 1% on the trailing average."""
    n = len(losses)
    if n < cfg.min_epochs or n <= cfg.plateau_window:
        return False
    trailing = float(np.mean(losses[-cfg.plateau_window - 1:-1]))
    return losses[-1] >= (1.0 - cfg.plateau_threshold) * trailing


def train(m, loss_kind: str, x0, y, cfg: TrainConfig, schedule):
    """Train ``m`` in place with shuffled mini-batches until the plateau rule fires.

    ``schedule`` is a DiscreteSchedule for ``loss_kind="ddpm"`` and a
    VeSchedule for ``"dsm_ve"``. Returns ``(m, LossCurve)``.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n = x0.shape[0]
    if n == 0:
        raise TrainingError("empty dataset")
    y = None if y is None else np.atleast_2d(np.asarray(y, dtype=np.float64))
    if loss_kind == "ddpm":
        step_loss = lambda xb, yb, rng: ddpm_loss(m, schedule, xb, yb, rng)
    elif loss_kind == "dsm_ve":
        step_loss = lambda xb, yb, rng: dsm_ve_loss(m, schedule, xb, yb, rng, cfg.t_eps)
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")

    rng = np.random.default_rng(cfg.seed)
    trainable = isinstance(m, MlpDenoiser)
    state = AdamState.zeros_like(m.params) if trainable else None
    bs = min(cfg.batch_size, n)
    curve = LossCurve()
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            loss, grads = step_loss(x0[idx], None if y is None else y[idx], rng)
            if not np.isfinite(loss):
                raise TrainingError("non-finite training loss", epoch)
            if trainable:
                adam_step(state, m.params, grads, cfg)
            batch_losses.append(loss)
        curve.losses.append(float(np.mean(batch_losses)))
        curve.seconds.append(time.perf_counter() - t0)
        log.info("epoch %d loss %.6g", epoch, curve.losses[-1])
        if plateaued(curve.losses, cfg):
            break
    return m, curve

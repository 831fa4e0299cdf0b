"""Score fields: analytic oracles, the MLP denoiser and eps/score adapters.

Every sampler consumes a *true* score ``s(x, y, t) ~ grad_x log p_t(x | y)``.
Networks are trained either as noise predictors (``head="eps"``, DDPM) or as
sigma-scaled score predictors (``head="sigma_score"``, VE-SDE, trained to
output ``-eps``); the adapters here convert both to true scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import expit, logsumexp

from .schedules import DiscreteSchedule, VeSchedule, ve_sigma


class ScoreError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreField:
    """Callable ``fn(x, y, t) -> score`` plus metadata.

    ``time_domain`` is ``"discrete"`` (integer step index) or ``"continuous"``.
    """

    fn: Callable
    time_domain: str = "continuous"
    cond_dim: int = 0

    def __call__(self, x, y, t):
        return self.fn(x, y, t)


# ---------------------------------------------------------------------------
# analytic oracles

def gaussian_score(mu, variance: float):
    """Score of N(mu, variance * I)."""
    if not variance > 0:
        raise ScoreError(f"variance must be positive, got {variance}")
    mu = np.asarray(mu, dtype=np.float64)

    def score(x):
        return -(np.asarray(x, dtype=np.float64) - mu) / variance

    return score


def gmm_score(weights, means, variances):
    """Score of an isotropic Gaussian mixture, log-sum-exp stabilised.

    ``x`` may be a single vector of shape (d,) or a batch (n, d).
    """
    w = np.asarray(weights, dtype=np.float64)
    mu = np.atleast_2d(np.asarray(means, dtype=np.float64))
    v = np.asarray(variances, dtype=np.float64)
    if np.any(w <= 0) or not np.isclose(w.sum(), 1.0, rtol=0, atol=1e-12):
        raise ScoreError("weights must be positive and sum to 1")
    if np.any(v <= 0):
        raise ScoreError("variances must be positive")
    if not (w.shape[0] == mu.shape[0] == v.shape[0]):
        raise ScoreError("weights, means and variances disagree in length")
    d = mu.shape[1]

    def score(x):
        x = np.asarray(x, dtype=np.float64)
        xb = np.atleast_2d(x)
        diff = xb[:, None, :] - mu[None, :, :]          # (n, K, d)
        sq = np.sum(diff * diff, axis=-1)                # (n, K)
        logp = np.log(w) - 0.5 * d * np.log(2 * np.pi * v) - 0.5 * sq / v
        resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
        out = -np.einsum("nk,nkd->nd", resp / v, diff)
        return out.reshape(x.shape)

    return score


def perturbed_density_score(v: VeSchedule, t: float):
    """Exact score of standard-normal data after VE perturbation to time t."""
    var = 1.0 + ve_sigma(v, t) ** 2

    def score(x):
        return -np.asarray(x, dtype=np.float64) / var

    return score


def ve_standard_normal_field(v: VeSchedule) -> ScoreField:
    """Continuous-time ScoreField for VE-perturbed N(0, I): -x / (1 + sigma(t)^2)."""

    def fn(x, y, t):
        return -np.asarray(x) / (1.0 + ve_sigma(v, t) ** 2)

    return ScoreField(fn, "continuous", 0)


def ddpm_standard_normal_eps(s: DiscreteSchedule) -> ScoreField:
    """Optimal noise predictor for N(0, I) data: E[eps | x_t] = sqrt(1 - abar_t) x_t."""

    def fn(x, y, t):
        return np.sqrt(1.0 - s.alpha_bars[t - 1]) * np.asarray(x)

    return ScoreField(fn, "discrete", 0)


def eps_to_score(eps_hat, noise_scale):
    """True score from a noise prediction: -eps_hat / noise_scale."""
    scale = np.asarray(noise_scale, dtype=np.float64)
    if np.any(scale <= 0):
        raise ScoreError("noise scale must be positive")
    return -np.asarray(eps_hat) / scale


def score_to_eps(score, noise_scale):
    scale = np.asarray(noise_scale, dtype=np.float64)
    if np.any(scale <= 0):
        raise ScoreError("noise scale must be positive")
    return -np.asarray(score) * scale


# ---------------------------------------------------------------------------
# time embedding

def time_embedding(t, dim: int = 32, T: Optional[int] = None) -> np.ndarray:
    """Sinusoidal embedding, interleaved (sin, cos) pairs.

    Frequencies are geometrically spaced from 1 to 1e4. Discrete step indices
    are divided by ``T`` first. Scalar ``t`` gives shape (dim,), an array of n
    times gives (n, dim).
    """
    if dim <= 0 or dim % 2:
        raise ScoreError(f"embedding dim must be a positive even integer, got {dim}")
    ta = np.asarray(t, dtype=np.float64)
    if T is not None:
        ta = ta / T
    half = dim // 2
    freqs = np.geomspace(1.0, 1e4, half) if half > 1 else np.ones(1)
    ang = ta[..., None] * freqs
    out = np.empty(ang.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


# ---------------------------------------------------------------------------
# MLP denoiser

def silu(z):
    return z * expit(z)


def silu_grad(z):
    s = expit(z)
    return s * (1.0 + z * (1.0 - s))


HEADS = ("eps", "sigma_score")


@dataclass
class MlpDenoiser:
    """Fully connected SiLU network on ``concat(x, y, time_embedding(t))``.

    ``params`` alternates weight matrices (fan_in, fan_out) and bias rows
    (1, fan_out). The last layer is affine with no activation.
    """

    x_dim: int
    y_dim: int = 0
    hidden: tuple = (256, 256, 256)
    time_embed_dim: int = 32
    head: str = "eps"
    seed: int = 0
    params: list = field(default=None, repr=False)
    # centre and spread of the Gaussian skip used by the preconditioned heads
    data_mean: float = 0.5
    data_std: float = 0.5

    def __post_init__(self):
        if self.head not in HEADS:
            raise ScoreError(f"unknown head {self.head!r}")
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.params is None:
            self.params = init_params(self.widths, self.seed)
        else:
            self.params = [np.asarray(p, dtype=np.float64) for p in self.params]
            shapes = [p.shape for p in self.params]
            expected = []
            for a, b in zip(self.widths[:-1], self.widths[1:]):
                expected += [(a, b), (1, b)]
            if shapes != expected:
                raise ScoreError(f"parameter shapes {shapes} do not match widths {self.widths}")

    @property
    def in_dim(self) -> int:
        return self.x_dim + self.y_dim + self.time_embed_dim

    @property
    def widths(self) -> list:
        return [self.in_dim, *self.hidden, self.x_dim]

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    def param_names(self) -> list:
        names = []
        for i in range(self.n_layers):
            names += [f"W{i}", f"b{i}"]
        return names

    def layout(self, x, y, t_unit) -> np.ndarray:
        """Assemble the network input; ``t_unit`` is time already scaled to [0, 1]."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        parts = [x]
        if self.y_dim:
            if y is None:
                raise ScoreError("model is conditional but no condition was given")
            yb = np.atleast_2d(np.asarray(y, dtype=np.float64))
            if yb.shape[0] == 1 and n > 1:
                yb = np.broadcast_to(yb, (n, yb.shape[1]))
            parts.append(yb)
        if self.time_embed_dim:
            tt = np.broadcast_to(np.asarray(t_unit, dtype=np.float64), (n,))
            parts.append(time_embedding(tt, self.time_embed_dim))
        inp = np.concatenate(parts, axis=1)
        if inp.shape[1] != self.in_dim:
            raise ScoreError(f"input width {inp.shape[1]} != expected {self.in_dim}")
        return inp

    def __call__(self, x, y, t_unit):
        squeeze = np.ndim(x) == 1
        out = mlp_forward(self, self.layout(x, y, t_unit))
        return out[0] if squeeze else out


def init_params(widths, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    params = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.append(np.zeros((1, fan_out)))
    return params


@dataclass
class GradientTape:
    """Activations cached by a forward pass, enough for exact reverse mode."""

    inputs: list      # input to each affine layer
    preacts: list     # pre-activation of each hidden layer


def mlp_forward(m: MlpDenoiser, inp, tape: bool = False):
    """Forward pass over an already assembled input matrix (n, in_dim)."""
    h = np.asarray(inp, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != m.in_dim:
        raise ScoreError(f"expected input of shape (n, {m.in_dim}), got {h.shape}")
    inputs, preacts = [], []
    L = m.n_layers
    for i in range(L):
        W, b = m.params[2 * i], m.params[2 * i + 1]
        inputs.append(h)
        z = h @ W + b
        if i < L - 1:
            preacts.append(z)
            h = silu(z)
        else:
            h = z
    if tape:
        return h, GradientTape(inputs, preacts)
    return h


def backprop(m: MlpDenoiser, tape: GradientTape, grad_out) -> list:
    """Parameter gradients given dLoss/dOutput, in ``m.params`` order."""
    g = np.asarray(grad_out, dtype=np.float64)
    L = m.n_layers
    if len(tape.inputs) != L:
        raise ScoreError("tape does not belong to this network")
    grads = [None] * (2 * L)
    for i in reversed(range(L)):
        grads[2 * i] = tape.inputs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0, keepdims=True)
        if i > 0:
            g = (g @ m.params[2 * i].T) * silu_grad(tape.preacts[i - 1])
    return grads


# ---------------------------------------------------------------------------
# adapters from trained networks to score fields

def ve_head(m: MlpDenoiser, v: VeSchedule, x, y, t, tape: bool = False):
    """Sigma-scaled-score head (predicts -eps) at continuous times t.

    head = -sigma xc / (sigma^2 + sd^2) + sd / sqrt(sigma^2 + sd^2) * F(xc / sqrt(sigma^2 + sd^2))

    with xc = x - m.data_mean and sd = m.data_std. The first term is the exact
    head for N(data_mean, sd^2 I) data, so F only learns a unit-scale residual.
    """
    mu, sd = m.data_mean, m.data_std
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    sig = np.asarray(ve_sigma(v, t), dtype=np.float64)
    sig = sig.reshape(sig.shape + (1,) * (x.ndim - sig.ndim))
    tot = sig * sig + sd ** 2
    out = mlp_forward(m, m.layout((x - mu) / np.sqrt(tot), y, np.asarray(t) / v.t_max),
                      tape=tape)
    net, tp = out if tape else (out, None)
    c_out = sd / np.sqrt(tot)
    head = -sig * (x - mu) / tot + c_out * net
    return (head, _ScaledTape(tp, c_out)) if tape else head


def ddpm_eps(m: MlpDenoiser, s: DiscreteSchedule, x, y, t, tape: bool = False):
    """Noise prediction at discrete step(s) t.

    eps_hat = sqrt(1 - ab) xc / tot + sqrt(ab) sd / sqrt(tot) * F(xc / sqrt(tot)),
    xc = x - sqrt(ab) data_mean, tot = ab sd^2 + 1 - ab; the first term is
    E[eps | x_t] for N(data_mean, sd^2 I) data.
    """
    mu, sd = m.data_mean, m.data_std
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    ti = np.asarray(t)
    ab = np.asarray(s.alpha_bars[ti - 1], dtype=np.float64)
    ab = ab.reshape(ab.shape + (1,) * (x.ndim - ab.ndim))
    tot = ab * sd ** 2 + 1.0 - ab
    xc = x - np.sqrt(ab) * mu
    out = mlp_forward(m, m.layout(xc / np.sqrt(tot), y, ti.astype(np.float64) / s.T), tape=tape)
    net, tp = out if tape else (out, None)
    c_out = np.sqrt(ab) * sd / np.sqrt(tot)
    eps = np.sqrt(1.0 - ab) * xc / tot + c_out * net
    return (eps, _ScaledTape(tp, c_out)) if tape else eps


@dataclass
class _ScaledTape:
    """Tape of a head of the form skip(x) + c_out * F(...)."""

    tape: GradientTape
    c_out: np.ndarray


def head_backprop(m: MlpDenoiser, tape, grad_out) -> list:
    """Parameter gradients through a preconditioned head or a bare network."""
    if isinstance(tape, _ScaledTape):
        return backprop(m, tape.tape, tape.c_out * np.asarray(grad_out))
    return backprop(m, tape, grad_out)


def eps_model_field(m: MlpDenoiser, s: DiscreteSchedule) -> ScoreField:
    """Noise-prediction field consumed by the ancestral sampler (discrete t)."""

    def fn(x, y, t):
        squeeze = np.ndim(x) == 1
        out = ddpm_eps(m, s, x, y, t)
        return out[0] if squeeze else out

    return ScoreField(fn, "discrete", m.y_dim)


def ve_score_field(m: MlpDenoiser, v: VeSchedule) -> ScoreField:
    """True score from the sigma-scaled head: the head predicts -eps."""

    def fn(x, y, t):
        squeeze = np.ndim(x) == 1
        head = ve_head(m, v, x, y, t)
        sig = np.asarray(ve_sigma(v, t), dtype=np.float64)
        out = eps_to_score(-head, sig.reshape(sig.shape + (1,) * (head.ndim - sig.ndim)))
        return out[0] if squeeze else out

    return ScoreField(fn, "continuous", m.y_dim)

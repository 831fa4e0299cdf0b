import mpmath as mp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import multivariate_normal

from scoreflow.schedules import VeSchedule, linear_beta_schedule, ve_sigma
from scoreflow.scores import (MlpDenoiser, ScoreError, backprop, ddpm_eps, ddpm_standard_normal_eps,
                              eps_model_field, eps_to_score, gaussian_score, gmm_score,
                              head_backprop, mlp_forward, perturbed_density_score, score_to_eps,
                              time_embedding, ve_head, ve_score_field, ve_standard_normal_field)


def fd_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / (np.abs(b) + 1e-8))


def test_gaussian_score_closed_form():
    s = gaussian_score(np.zeros(3), 1.0)
    np.testing.assert_array_equal(s(np.zeros(3)), np.zeros(3))
    v = np.array([0.5, -2.0, 3.0])
    np.testing.assert_array_equal(s(v), -v)
    with pytest.raises(ScoreError):
        gaussian_score(np.zeros(3), 0.0)


def test_gaussian_score_matches_fd_of_logpdf(rng):
    mu, var = rng.standard_normal(3), 0.7
    s = gaussian_score(mu, var)
    logp = multivariate_normal(mu, var * np.eye(3)).logpdf
    for _ in range(20):
        x = mu + rng.standard_normal(3)
        assert rel_err(s(x), fd_grad(logp, x)) < 1e-4


def _gmm_logpdf(w, mus, var):
    def f(x):
        return np.log(sum(wk * multivariate_normal(m, v * np.eye(len(x))).pdf(x)
                          for wk, m, v in zip(w, mus, var)))
    return f


def test_gmm_score_matches_fd(rng):
    w = np.array([0.3, 0.5, 0.2])
    mus = rng.standard_normal((3, 2))
    var = np.array([0.5, 1.0, 0.3])
    s = gmm_score(w, mus, var)
    logp = _gmm_logpdf(w, mus, var)
    for _ in range(20):
        x = 1.5 * rng.standard_normal(2)
        assert rel_err(s(x), fd_grad(logp, x)) < 1e-4


def test_gmm_reductions(rng):
    mu = rng.standard_normal(2)
    x = rng.standard_normal((5, 2))
    np.testing.assert_allclose(gmm_score([1.0], [mu], [0.4])(x), gaussian_score(mu, 0.4)(x),
                               rtol=1e-13)
    sym = gmm_score([0.5, 0.5], [[-1.0, -1.0], [1.0, 1.0]], [0.2, 0.2])
    np.testing.assert_allclose(sym(np.zeros(2)), 0.0, atol=1e-15)


def test_gmm_far_tail_is_stable():
    s = gmm_score([0.5, 0.5], [[-1.0], [1.0]], [1e-3, 1e-3])
    out = s(np.array([40.0]))
    assert np.isfinite(out).all()
    assert out[0] == pytest.approx(-(40.0 - 1.0) / 1e-3)


@pytest.mark.parametrize("w,v", [([0.6, 0.6], [1, 1]), ([-0.5, 1.5], [1, 1]), ([0.5, 0.5], [1, 0])])
def test_gmm_invalid(w, v):
    with pytest.raises(ScoreError):
        gmm_score(w, [[0.0], [1.0]], v)


def test_perturbed_density_score_cases(rng):
    v = VeSchedule()
    x = rng.standard_normal(4)
    np.testing.assert_array_equal(perturbed_density_score(v, 0.0)(x), -x)
    np.testing.assert_array_equal(perturbed_density_score(v, 0.5)(np.zeros(4)), np.zeros(4))
    field = ve_standard_normal_field(v)
    np.testing.assert_allclose(field(x, None, 0.3), perturbed_density_score(v, 0.3)(x), rtol=1e-15)


def test_perturbed_variance_by_sampling(rng):
    v = VeSchedule()
    t, n = 0.4, 50000
    x = rng.standard_normal(n) + ve_sigma(v, t) * rng.standard_normal(n)
    fitted = x.var()
    # score -x / var implies variance = -x / score
    implied = -1.0 / perturbed_density_score(v, t)(np.array([1.0]))[0]
    assert fitted == pytest.approx(implied, rel=3 * np.sqrt(2.0 / n))


def test_optimal_eps_for_standard_normal(rng):
    """E[eps | x_t] for N(0, I) data equals sqrt(1 - abar) x_t: check by regression."""
    s = linear_beta_schedule()
    n = 200000
    for t in (10, 300, 900):
        ab = s.alpha_bars[t - 1]
        eps = rng.standard_normal(n)
        xt = np.sqrt(ab) * rng.standard_normal(n) + np.sqrt(1 - ab) * eps
        slope = np.dot(xt, eps) / np.dot(xt, xt)
        assert slope == pytest.approx(np.sqrt(1 - ab), abs=4 / np.sqrt(n))
        field = ddpm_standard_normal_eps(s)
        x = rng.standard_normal(3)
        np.testing.assert_allclose(eps_to_score(field(x, None, t), np.sqrt(1 - ab)), -x, rtol=1e-14)


def test_eps_score_adapters():
    v = np.array([1.0, -4.0])
    np.testing.assert_array_equal(eps_to_score(np.zeros(2), 3.0), np.zeros(2))
    np.testing.assert_array_equal(eps_to_score(v, 2.0), -v / 2)
    with pytest.raises(ScoreError):
        eps_to_score(v, 0.0)
    with pytest.raises(ScoreError):
        score_to_eps(v, -1.0)


@given(arrays(np.float64, 5, elements=st.floats(-1e6, 1e6)), st.floats(1e-3, 1e3))
def test_adapter_round_trip(eps, scale):
    np.testing.assert_allclose(score_to_eps(eps_to_score(eps, scale), scale), eps,
                               rtol=1e-14, atol=1e-300)


def test_time_embedding_basics():
    e = time_embedding(0.0, 8)
    np.testing.assert_array_equal(e, [0, 1, 0, 1, 0, 1, 0, 1])
    grid = time_embedding(np.arange(1, 1001), 32, T=1000)
    assert grid.shape == (1000, 32)
    assert np.all(np.abs(grid) <= 1.0)
    assert len({row.tobytes() for row in grid}) == 1000
    with pytest.raises(ScoreError):
        time_embedding(0.5, 7)
    np.testing.assert_array_equal(time_embedding(250, 16, T=1000), time_embedding(0.25, 16))


def _model(x_dim=2, y_dim=0, hidden=(3,), temb=0, **kw):
    return MlpDenoiser(x_dim, y_dim, hidden, temb, **kw)


def test_zero_network_gives_zero():
    m = _model(3, 2, (4, 4), 4)
    m.params = [np.zeros_like(p) for p in m.params]
    out = m(np.ones((5, 3)), np.ones((5, 2)), 0.3)
    np.testing.assert_array_equal(out, np.zeros((5, 3)))


def test_hand_set_2_2_2_network_golden():
    W0 = np.array([[0.5, -1.0], [2.0, 0.25]])
    b0 = np.array([[0.1, -0.2]])
    W1 = np.array([[1.5, -0.5], [0.75, 2.0]])
    b1 = np.array([[0.05, 0.3]])
    m = MlpDenoiser(2, 0, (2,), 0, params=[W0, b0, W1, b1])
    x = np.array([[0.3, -0.7]])
    mp.mp.dps = 40
    xs = [mp.mpf("0.3"), mp.mpf("-0.7")]
    h = []
    for j in range(2):
        z = xs[0] * mp.mpf(W0[0, j]) + xs[1] * mp.mpf(W0[1, j]) + mp.mpf(b0[0, j])
        h.append(z / (1 + mp.exp(-z)))
    ref = [h[0] * mp.mpf(W1[0, k]) + h[1] * mp.mpf(W1[1, k]) + mp.mpf(b1[0, k]) for k in range(2)]
    np.testing.assert_allclose(m(x, None, 0.0)[0], [float(r) for r in ref], rtol=1e-14)


def test_batch_permutation_equivariance(rng):
    m = _model(3, 2, (8,), 4)
    x, y = rng.standard_normal((6, 3)), rng.standard_normal((6, 2))
    t = rng.random(6)
    perm = rng.permutation(6)
    np.testing.assert_array_equal(m(x, y, t)[perm], m(x[perm], y[perm], t[perm]))


def test_layout_and_errors(rng):
    m = _model(3, 2, (8,), 4)
    assert m.widths == [9, 8, 3]
    out = m(rng.standard_normal((4, 3)), rng.standard_normal(2), 0.5)
    assert out.shape == (4, 3)
    assert m(np.zeros(3), np.zeros(2), 0.1).shape == (3,)
    with pytest.raises(ScoreError):
        m(np.zeros((2, 3)), None, 0.5)
    with pytest.raises(ScoreError):
        mlp_forward(m, np.zeros((2, 5)))
    with pytest.raises(ScoreError):
        MlpDenoiser(3, 0, (4,), 0, params=[np.zeros((3, 4))])
    with pytest.raises(ScoreError):
        MlpDenoiser(3, head="bogus")


def test_init_is_seeded_and_bounded():
    a, b = _model(4, 0, (16,), seed=3), _model(4, 0, (16,), seed=3)
    for p, q in zip(a.params, b.params):
        np.testing.assert_array_equal(p, q)
    assert np.all(np.abs(a.params[0]) <= 1 / np.sqrt(4))
    assert np.all(a.params[1] == 0)


def test_linear_model_gradient_closed_form(rng):
    m = MlpDenoiser(3, 0, (), 0)
    x, target = rng.standard_normal((1, 3)), rng.standard_normal((1, 3))
    out, tape = mlp_forward(m, x, tape=True)
    gW, gb = backprop(m, tape, 2 * (out - target))
    np.testing.assert_allclose(gW, np.outer(x[0], 2 * (out - target)[0]), rtol=1e-14)
    np.testing.assert_allclose(gb, 2 * (out - target), rtol=1e-14)


def test_constant_loss_has_zero_gradient(rng):
    m = _model(2, 0, (5, 5))
    _, tape = mlp_forward(m, rng.standard_normal((4, 2)), tape=True)
    for g in backprop(m, tape, np.zeros((4, 2))):
        assert not np.any(g)


def _loss_fd_check(m, loss_of_params, grads, rng, n_checks=40, h=1e-4):
    worst = 0.0
    for _ in range(n_checks):
        k = rng.integers(len(m.params))
        idx = tuple(rng.integers(s) for s in m.params[k].shape)
        old = m.params[k][idx]
        m.params[k][idx] = old + h
        up = loss_of_params()
        m.params[k][idx] = old - h
        dn = loss_of_params()
        m.params[k][idx] = old
        fd = (up - dn) / (2 * h)
        worst = max(worst, abs(grads[k][idx] - fd) / (abs(fd) + 1e-8))
    return worst


def test_network_gradients_match_fd(rng):
    m = MlpDenoiser(3, 2, (8, 8), 4, seed=1)
    inp = m.layout(rng.standard_normal((5, 3)), rng.standard_normal((5, 2)), rng.random(5))
    target = rng.standard_normal((5, 3))

    def loss():
        return float(np.sum((mlp_forward(m, inp) - target) ** 2))

    out, tape = mlp_forward(m, inp, tape=True)
    grads = backprop(m, tape, 2 * (out - target))
    assert _loss_fd_check(m, loss, grads, rng) < 1e-3


@pytest.mark.parametrize("kind", ["ve", "ddpm"])
def test_head_gradients_match_fd(kind, rng):
    m = MlpDenoiser(3, 1, (6,), 4, seed=2, data_mean=0.2, data_std=0.3)
    x, y = rng.standard_normal((4, 3)), rng.standard_normal((4, 1))
    target = rng.standard_normal((4, 3))
    if kind == "ve":
        v, t = VeSchedule(), rng.uniform(0.01, 1, 4)
        head = lambda tape=False: ve_head(m, v, x, y, t, tape=tape)
    else:
        s, t = linear_beta_schedule(50), rng.integers(1, 51, 4)
        head = lambda tape=False: ddpm_eps(m, s, x, y, t, tape=tape)
    out, tape = head(True)
    grads = head_backprop(m, tape, 2 * (out - target))
    assert _loss_fd_check(m, lambda: float(np.sum((head() - target) ** 2)), grads, rng) < 1e-3


def _zeroed(m):
    m.params = [np.zeros_like(p) for p in m.params]
    return m


def test_ve_skip_is_exact_gaussian_score(rng):
    """With F = 0 the adapter returns the score of N(mean, sd^2) perturbed to time t."""
    v = VeSchedule()
    m = _zeroed(MlpDenoiser(2, 0, (4,), 4, head="sigma_score", data_mean=0.3, data_std=0.7))
    x = rng.standard_normal((6, 2))
    for t in (0.01, 0.5, 1.0):
        ref = -(x - 0.3) / (0.49 + ve_sigma(v, t) ** 2)
        np.testing.assert_allclose(ve_score_field(m, v)(x, None, t), ref, rtol=1e-13)
    ts = np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
    per_row = ve_score_field(m, v)(x, None, ts)
    np.testing.assert_allclose(per_row, -(x - 0.3) / (0.49 + ve_sigma(v, ts)[:, None] ** 2),
                               rtol=1e-13)


def test_ddpm_skip_reduces_to_standard_normal_oracle(rng):
    s = linear_beta_schedule()
    m = _zeroed(MlpDenoiser(2, 0, (4,), 4, data_mean=0.0, data_std=1.0))
    x = rng.standard_normal((5, 2))
    for t in (1, 400, 1000):
        np.testing.assert_allclose(eps_model_field(m, s)(x, None, t),
                                   ddpm_standard_normal_eps(s)(x, None, t), rtol=1e-13)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import linear_policy, random_policy
from maxent_lab import complexity as C
from maxent_lab.dynamics import Env, EnvConfig
from maxent_lab.policy import PolicyParams, init_policy
from toys import Bandit, Lin2

matrices = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                  elements=st.floats(-10, 10, allow_nan=False))


# ---------------------------------------------------------------- norms


def test_vector_norm_examples():
    th = np.array([-3.0, 4.0])
    assert C.vector_norm(th, 2) == 5.0
    assert C.vector_norm(th, 1) == 7.0
    assert C.vector_norm(th, np.inf) == 4.0
    assert all(C.vector_norm(np.zeros(4), p) == 0 for p in (1, 2, "inf"))
    with pytest.raises(ValueError):
        C.vector_norm(th, "F")
    with pytest.raises(ValueError):
        C.vector_norm(th, 3)


def test_operator_norm_examples():
    D = np.diag([2.0, 3.0])
    assert [C.operator_norm(D, p) for p in (1, 2, "inf")] == pytest.approx([3, 3, 3], abs=1e-12)
    assert C.operator_norm(D, "F") == pytest.approx(np.sqrt(13))
    N = np.array([[0.0, 1.0], [0.0, 0.0]])
    assert [C.operator_norm(N, p) for p in (1, 2, "inf", "F")] == pytest.approx([1, 1, 1, 1], abs=1e-12)
    assert C.operator_norm(np.zeros((3, 2)), 2) == 0.0


def test_spectral_norm_matches_eigensolve(rng):
    for _ in range(100):
        W = rng.standard_normal((5, 5))
        ref = np.sqrt(np.linalg.eigvalsh(W.T @ W)[-1])
        assert abs(C.spectral_norm(W) - ref) < 1e-8 * max(1.0, ref)


def test_spectral_norm_nonconvergence_reports_residual():
    # nearly tied singular values: five iterations cannot meet an unreachable tolerance
    W = np.array([[0.0, 1.0], [1.0 - 1e-9, 0.0]])
    with pytest.raises(C.PowerIterationError, match="residual"):
        C.spectral_norm(W, tol=1e-16, max_iter=5)


@settings(max_examples=100, deadline=None)
@given(matrices)
def test_operator_norm_inequalities(W):
    n2 = C.operator_norm(W, 2)
    assert n2 <= C.operator_norm(W, "F") * (1 + 1e-9) + 1e-12
    assert np.sqrt(C.operator_norm(W, 1) * C.operator_norm(W, "inf")) >= n2 * (1 - 1e-9) - 1e-12


def test_layer_product_norm(rng):
    p = PolicyParams([np.eye(3), np.eye(3), np.eye(3)], [np.ones(3)] * 3, np.zeros(3))
    assert all(C.layer_product_norm(p, k) == pytest.approx(1.0) for k in (1, 2, "inf"))
    q = random_policy(rng, hidden=(6, 6))
    for k in ("1", "2", "inf", "F"):
        direct = np.prod([C.operator_norm(W, k) for W in q.weights])
        assert C.layer_product_norm(q, k) == pytest.approx(direct, rel=1e-12)
        s = q.copy()
        s.weights[1] = -2.5 * s.weights[1]
        assert C.layer_product_norm(s, k) == pytest.approx(2.5 * direct, rel=1e-9)
        s.biases[0] = s.biases[0] + 100  # biases excluded
        assert C.layer_product_norm(s, k) == pytest.approx(2.5 * direct, rel=1e-9)


# ---------------------------------------------------------------- FIM


def test_fim_linear_policy():
    p = linear_policy([[0.3, -0.7]], 0.5)
    mean, samples = C.fim_trace_closed_form(p, np.array([[1.0, 2.0]]))
    assert mean == pytest.approx(20.0, rel=1e-14)
    p2 = linear_policy([[0.3, -0.7]], 1.5)
    assert C.fim_trace_closed_form(p2, [[1.0, 2.0]])[0] == pytest.approx(20.0 / 9, rel=1e-14)


def test_fim_permutation_invariant_and_nonnegative(rng):
    p = random_policy(rng)
    S = rng.standard_normal((30, 3))
    m1, s1 = C.fim_trace_closed_form(p, S)
    perm = rng.permutation(30)
    m2, s2 = C.fim_trace_closed_form(p, S[perm])
    assert np.all(s1 >= 0)
    np.testing.assert_allclose(s2, s1[perm], rtol=1e-14)
    assert m1 == pytest.approx(m2, rel=1e-14)


def test_fim_mc_agrees_with_closed_form(rng):
    for _ in range(3):
        p = random_policy(rng, 3, 2, hidden=(8, 8))
        S = rng.standard_normal((16, 3))
        cf, _ = C.fim_trace_closed_form(p, S)
        mc, se = C.fim_trace_mc(p, S, 200, rng)
        assert abs(mc - cf) < 3 * se + 1e-9 * cf


def test_fim_mc_zero_weight_network(rng):
    # zero weights: grad mu_j = (tanh(b2) in row j of W_out, 1 in b_out_j), nothing upstream
    p = init_policy(2, 2, rng, hidden=(4, 4))
    for W in p.weights:
        W[:] = 0.0
    p.biases[1][:] = rng.standard_normal(4)
    analytic = 2 * (1 + np.sum(np.tanh(p.biases[1]) ** 2))
    S = rng.standard_normal((8, 2))
    assert C.fim_trace_closed_form(p, S)[0] == pytest.approx(analytic, rel=1e-13)
    mc, se = C.fim_trace_mc(p, S, 500, rng)
    assert abs(mc - analytic) < 3 * se + 1e-6


def test_fim_scales_inverse_variance(rng):
    p = random_policy(rng)
    S = rng.standard_normal((10, 3))
    base = C.fim_trace_closed_form(p, S)[0]
    q = p.copy()
    q.log_std = p.log_std + np.log(1e-3)
    assert C.fim_trace_closed_form(q, S)[0] == pytest.approx(base * 1e6, rel=1e-12)


def test_fim_mc_requires_samples(rng):
    with pytest.raises(ValueError):
        C.fim_trace_mc(random_policy(rng), np.zeros((2, 3)), 50, rng)


# ---------------------------------------------------------------- objective Hessian


def test_hessian_bandit():
    pol = PolicyParams([np.zeros((1, 1))], [None], np.zeros(1))
    h = C.objective_hessian_estimate(pol, Bandit(), 100_000, np.random.default_rng(0))
    assert abs(h.matrix[0, 0] - 2.0) < 3 * h.stderr[0, 0]


def test_hessian_zero_cost():
    pol = linear_policy([[0.3, -0.4]], 0.5)
    env = Lin2()
    env.cost = lambda x, a: np.zeros(len(x))
    h = C.objective_hessian_estimate(pol, env, 1000, np.random.default_rng(0))
    assert np.all(h.matrix == 0) and h.trace == 0


def test_hessian_symmetric_and_matches_fd():
    pol = linear_policy([[0.3, -0.4]], 0.5)
    env = Lin2()
    h = C.objective_hessian_estimate(pol, env, 200_000, np.random.default_rng(1))
    assert np.linalg.norm(h.matrix - h.matrix.T) / np.linalg.norm(h.matrix) < 0.05
    from toys import fd_hessian
    ref = fd_hessian(pol, env, 200_000, 5)
    assert np.linalg.norm(h.matrix - ref) / np.linalg.norm(ref) < 0.1


def test_hessian_nonlinear_net_bandit():
    # tanh net with a constant input: the curvature term of mu matters and J = mu(theta)^2 + 1
    rng = np.random.default_rng(3)
    pol = init_policy(1, 1, rng, hidden=(2,), out_gain=1.0)
    pol.biases[0][:] = [0.3, -0.2]
    h = C.objective_hessian_estimate(pol, Bandit(), 200_000, np.random.default_rng(4))
    # exact: J = mu^2 + 1, hess J = 2 (grad mu grad mu^T + mu hess mu)
    from maxent_lab.policy import forward_mean, mean_jacobian
    x = Bandit.x_ref[None]
    mu = forward_mean(pol, x)[0, 0]
    g = mean_jacobian(pol, x)[0, 0]
    Hmu = C._mean_hessians(pol, x)[0, 0]
    exact = 2 * (np.outer(g, g) + mu * Hmu)
    assert np.all(np.abs(h.matrix - exact) < 4 * h.stderr + 1e-6)


def test_hutchinson_trace_matches_full_trace():
    pol = linear_policy([[0.3, -0.4]], 0.5)
    env = Lin2()
    full = C.objective_hessian_estimate(pol, env, 100_000, np.random.default_rng(2))
    probe = C.objective_hessian_estimate(pol, env, 100_000, np.random.default_rng(2), max_params=0,
                                         n_probes=8)
    assert probe.matrix is None
    assert abs(probe.trace - full.trace) < 3 * np.hypot(probe.trace_stderr, full.trace_stderr)


# ---------------------------------------------------------------- distributions


def test_kde_normal_density(rng):
    k = C.kde(rng.standard_normal(10_000))
    assert len(k.grid) == 512
    d0 = np.interp(0.0, k.grid, k.density)
    assert abs(d0 - 1 / np.sqrt(2 * np.pi)) < 0.1 / np.sqrt(2 * np.pi)
    assert abs(C._trapezoid(k.density, k.grid) - 1) < 1e-3
    assert np.all(k.density >= 0)
    assert not k.degenerate


def test_kde_grid_span_and_bandwidth(rng):
    x = rng.exponential(size=500)
    k = C.kde(x, bandwidth=0.2)
    assert k.grid[0] == pytest.approx(x.min() - 0.6) and k.grid[-1] == pytest.approx(x.max() + 0.6)
    sd = x.std(ddof=1)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    assert C.silverman_bandwidth(x) == pytest.approx(0.9 * min(sd, iqr / 1.34) * 500 ** -0.2)


def test_kde_degenerate_and_small():
    assert C.kde(np.full(20, 3.0)).degenerate
    with pytest.raises(ValueError):
        C.kde(np.arange(5.0))


def test_skewness_kurtosis(rng):
    s, k = C.skewness_kurtosis([1.0, -1.0] * 10)
    assert s == pytest.approx(0, abs=1e-15) and k == pytest.approx(-2.0)
    n = 100_000
    s, k = C.skewness_kurtosis(rng.standard_normal(n))
    assert abs(s) < 3 * np.sqrt(6 / n) and abs(k) < 3 * np.sqrt(24 / n)
    s, _ = C.skewness_kurtosis(rng.exponential(size=n))
    assert abs(s - 2) < 0.1
    with pytest.raises(ValueError):
        C.skewness_kurtosis(np.ones(10))
    with pytest.raises(ValueError):
        C.skewness_kurtosis([1.0, 2.0, 3.0])


# ---------------------------------------------------------------- measure


def test_measure_report(rng):
    p = random_policy(rng, hidden=(16, 16))
    S = rng.standard_normal((200, 3))
    rep = C.measure(p, S)
    assert rep.n_states == 200
    assert set(rep.vector_norms) == {"1", "2", "inf"}
    assert set(rep.layer_products) == {"1", "2", "inf", "F"}
    assert all(v >= 0 for v in list(rep.vector_norms.values()) + list(rep.layer_products.values()))
    assert rep.fim_trace_mean == pytest.approx(np.mean(rep.fim_trace_samples))
    assert (rep.fim_skewness, rep.fim_excess_kurtosis) == pytest.approx(
        C.skewness_kurtosis(rep.fim_trace_samples))
    assert abs(C._trapezoid(rep.kde_density, rep.kde_grid) - 1) < 1e-3
    back = C.ComplexityReport.from_dict(rep.to_dict())
    assert back == rep
    header, row = rep.to_csv().splitlines()
    assert [float(v) for v in row.split(",")] == pytest.approx(list(map(float, rep.flat_row().values())),
                                                                rel=0, abs=0)


def test_sample_visitation_under_policy(rng):
    env = Env(EnvConfig("lorenz", horizon=30))
    p = init_policy(3, 1, rng, hidden=(8, 8), obs_shift=env.target.x_star, obs_scale=10.0)
    s = C.sample_visitation(p, env, 100, np.random.default_rng(0))
    assert s.states.shape == (100, 3)
    again = C.sample_visitation(p, env, 100, np.random.default_rng(0))
    assert np.array_equal(s.states, again.states)


def test_spectral_norm_near_tied_singular_values():
    # sigma_1 = 2, sigma_2 = 2 - 1e-3: the eigen-residual alone would need ~2e4 iterations
    Q, _ = np.linalg.qr(np.random.default_rng(3).standard_normal((5, 5)))
    W = Q @ np.diag([2.0, 2.0 - 1e-3, 1.0, 0.5, 0.1])
    assert abs(C.spectral_norm(W) - 2.0) <= 1e-8
    # a 1e-5 gap cannot be resolved in 1e4 iterations and must say so
    with pytest.raises(C.PowerIterationError, match="residual"):
        C.spectral_norm(Q @ np.diag([2.0, 2.0 - 1e-5, 1.0, 0.5, 0.1]))

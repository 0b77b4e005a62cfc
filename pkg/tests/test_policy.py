import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import linear_policy, random_policy
from maxent_lab.policy import (
    GradBuffer,
    PolicyParams,
    entropy,
    forward_mean,
    grad_log_prob,
    init_policy,
    init_value,
    kl_gaussian,
    load_checkpoint,
    log_prob,
    mean_jacobian,
    mean_jacobian_row_norms,
    sample_action,
    save_checkpoint,
    value_forward,
)

LOG_2PI = np.log(2 * np.pi)


def fd_gradient(f, theta, h=1e-5):
    g = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def flat_all(p):
    return np.concatenate([p.flat_mean(), p.log_std])


def with_flat_all(p, theta):
    q = p.with_flat_mean(theta[:-p.act_dim])
    q.log_std = theta[-p.act_dim:].copy()
    return q


def hand_mean(p, x):
    """Independent evaluation of W_out tanh(W2 tanh(W1 x + b1) + b2) + b_out."""
    h1 = np.tanh(p.W1 @ x + p.b1)
    h2 = np.tanh(p.W2 @ h1 + p.b2)
    return p.W_out @ h2 + p.b_out


def grad_rel_error(p, obs, act):
    g = grad_log_prob(p, obs, act).flat()
    fd = fd_gradient(lambda t: log_prob(with_flat_all(p, t), obs, act), flat_all(p))
    return np.linalg.norm(g - fd) / np.linalg.norm(fd)


def row_norm_rel_error(p, obs):
    rows = mean_jacobian_row_norms(p, obs)
    theta = p.flat_mean()
    fd = np.array([
        np.sum(fd_gradient(lambda t: forward_mean(p.with_flat_mean(t), obs)[j], theta) ** 2)
        for j in range(p.act_dim)
    ])
    return np.max(np.abs(rows - fd) / fd)


# ---------------------------------------------------------------- forward


def test_forward_zero_params():
    p = init_policy(3, 2, np.random.default_rng(0), hidden=(4, 4))
    for W in p.weights:
        W[:] = 0
    assert np.array_equal(forward_mean(p, np.ones(3)), np.zeros(2))
    p.biases[-1][:] = [1.5, -2.0]
    np.testing.assert_array_equal(forward_mean(p, np.ones(3)), [1.5, -2.0])


def test_forward_matches_hand_evaluation(rng):
    for _ in range(10):
        p = random_policy(rng, 4, 2, hidden=(64, 64))
        x = rng.standard_normal(4)
        np.testing.assert_allclose(forward_mean(p, x), hand_mean(p, x), rtol=1e-12, atol=1e-12)


def test_forward_batch_matches_single(rng):
    p = random_policy(rng)
    X = rng.standard_normal((7, 3))
    np.testing.assert_allclose(forward_mean(p, X), np.stack([forward_mean(p, x) for x in X]), atol=1e-14)


def test_forward_obs_normalization(rng):
    p = random_policy(rng)
    shift = np.array([1.0, 2.0, 3.0])
    q = PolicyParams(p.weights, p.biases, p.log_std, obs_shift=shift, obs_scale=10.0)
    x = rng.standard_normal(3)
    np.testing.assert_allclose(forward_mean(q, x), forward_mean(p, (x - shift) / 10.0), atol=1e-14)


def test_forward_bounded_by_saturation(rng):
    for _ in range(20):
        p = random_policy(rng)
        x = 100 * rng.standard_normal((50, 3))
        bound = np.sum(np.abs(p.W_out), axis=1) + np.abs(p.b_out)
        assert np.all(np.abs(forward_mean(p, x)) <= bound + 1e-12)


def test_forward_shape_mismatch(rng):
    with pytest.raises(ValueError):
        forward_mean(random_policy(rng), np.ones(5))


# ---------------------------------------------------------------- density


def test_log_prob_values():
    p = linear_policy([[0.0]], 1.0)
    assert log_prob(p, np.ones(1), np.zeros(1)) == pytest.approx(-0.5 * LOG_2PI, abs=1e-15)
    assert log_prob(p, np.ones(1), np.ones(1)) == pytest.approx(-0.5 * LOG_2PI - 0.5, abs=1e-15)
    assert -0.5 * LOG_2PI == pytest.approx(-0.9189, abs=1e-4)


def test_log_prob_integrates_to_one():
    p = linear_policy([[0.7]], 0.3)
    grid = np.linspace(-5, 5, 200_001)
    vals = np.exp(log_prob(p, np.ones((grid.size, 1)), grid[:, None]))
    assert abs((np.trapezoid if hasattr(np, "trapezoid") else np.trapz)(vals, grid) - 1) < 1e-4


def test_sample_action_degenerate_and_consistent(rng):
    p = random_policy(rng)
    p.log_std = np.log(np.full(2, 1e-12))
    x = rng.standard_normal(3)
    a, lp = sample_action(p, x, rng)
    np.testing.assert_allclose(a, forward_mean(p, x), atol=1e-10)
    q = random_policy(rng)
    a, lp = sample_action(q, x, rng)
    assert lp == pytest.approx(log_prob(q, x, a), rel=1e-14)


def test_sample_moments():
    rng = np.random.default_rng(2024)
    p = random_policy(rng)
    x = rng.standard_normal(3)
    n = 100_000
    a, _ = sample_action(p, np.repeat(x[None], n, 0), rng)
    mu, sd = forward_mean(p, x), p.std
    assert np.all(np.abs(a.mean(0) - mu) < 3 * sd / np.sqrt(n))
    cov = np.cov(a.T)
    var_se = sd**2 * np.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(np.diag(cov) - sd**2) < 3 * var_se)
    assert abs(cov[0, 1]) < 3 * sd[0] * sd[1] / np.sqrt(n)


def test_entropy_closed_form_and_scaling(rng):
    p = linear_policy(np.zeros((2, 3)), 1.0)
    assert entropy(p) == pytest.approx(2.837877, abs=1e-6)
    q = linear_policy(np.zeros((2, 3)), 2.0)
    assert entropy(q) - entropy(p) == pytest.approx(2 * np.log(2), abs=1e-14)


def test_entropy_matches_monte_carlo(rng):
    p = random_policy(rng)
    x = np.repeat(rng.standard_normal(3)[None], 100_000, 0)
    a, lp = sample_action(p, x, rng)
    se = lp.std(ddof=1) / np.sqrt(len(lp))
    assert abs(-lp.mean() - entropy(p)) < 3 * se


# ---------------------------------------------------------------- gradients


def test_grad_log_prob_finite_differences(rng):
    worst = 0.0
    for _ in range(25):
        p = random_policy(rng, 3, 2, hidden=(6, 5))
        obs, act = rng.standard_normal(3), rng.standard_normal(2)
        worst = max(worst, grad_rel_error(p, obs, act))
    assert worst < 1e-5


def test_grad_at_mean():
    rng = np.random.default_rng(0)
    p = random_policy(rng)
    x = rng.standard_normal(3)
    g = grad_log_prob(p, x, forward_mean(p, x))
    np.testing.assert_allclose(g.biases[-1], 0.0, atol=1e-15)
    np.testing.assert_allclose(g.log_std, -1.0, atol=1e-15)


def test_grad_batch_is_sum(rng):
    p = random_policy(rng)
    X, A = rng.standard_normal((5, 3)), rng.standard_normal((5, 2))
    total = sum(grad_log_prob(p, x, a).flat() for x, a in zip(X, A))
    np.testing.assert_allclose(grad_log_prob(p, X, A).flat(), total, atol=1e-12)


def test_grad_buffer_zeroing(rng):
    p = random_policy(rng)
    g = GradBuffer.zeros_like(p)
    assert [a.shape for a in g.arrays()] == [a.shape for a in p.arrays()]
    g.weights[0][:] = 1.0
    g.zero()
    assert np.all(g.flat() == 0)


def test_mean_jacobian_row_norms_linear():
    x = np.array([1.0, 2.0])
    p = linear_policy(np.random.default_rng(1).standard_normal((3, 2)), 0.5)
    np.testing.assert_allclose(mean_jacobian_row_norms(p, x), np.full(3, 5.0), rtol=1e-15)


def test_mean_jacobian_row_norms_zero_obs():
    p = linear_policy(np.ones((2, 3)), 1.0)
    assert np.all(mean_jacobian_row_norms(p, np.zeros(3)) == 0)


def test_mean_jacobian_row_norms_finite_differences(rng):
    worst = max(row_norm_rel_error(random_policy(rng, 3, 2, hidden=(6, 5)), rng.standard_normal(3))
                for _ in range(25))
    assert worst < 1e-5


def test_mean_jacobian_consistent_with_row_norms(rng):
    p = random_policy(rng)
    X = rng.standard_normal((4, 3))
    J = mean_jacobian(p, X)
    np.testing.assert_allclose(np.sum(J * J, axis=2), mean_jacobian_row_norms(p, X), rtol=1e-12)


# ---------------------------------------------------------------- KL


def test_kl_values():
    p0 = PolicyParams([np.zeros((1, 1))], [np.zeros(1)], np.zeros(1))
    p1 = PolicyParams([np.zeros((1, 1))], [np.ones(1)], np.zeros(1))
    assert kl_gaussian(p0, p0, np.ones(1)) == 0.0
    assert kl_gaussian(p0, p1, np.ones(1)) == pytest.approx(0.5, abs=1e-15)


def test_kl_orientation_and_monte_carlo(rng):
    # kl_gaussian(p, q) = E_{a ~ q}[log q(a) - log p(a)]
    p, q = random_policy(rng), random_policy(rng)
    x = rng.standard_normal(3)
    a, lq = sample_action(q, np.repeat(x[None], 100_000, 0), rng)
    d = lq - log_prob(p, np.repeat(x[None], 100_000, 0), a)
    assert abs(d.mean() - kl_gaussian(p, q, x)) < 3 * d.std(ddof=1) / np.sqrt(d.size)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_kl_nonnegative(seed):
    r = np.random.default_rng(seed)
    p, q = random_policy(r), random_policy(r)
    assert np.all(kl_gaussian(p, q, r.standard_normal((10, 3))) >= 0)
    assert np.all(kl_gaussian(p, p.copy(), r.standard_normal((10, 3))) == 0)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path, rng):
    p = init_policy(3, 1, rng, obs_shift=np.array([1.0, 2.0, 3.0]), obs_scale=10.0)
    v = init_value(3, rng)
    path = tmp_path / "ck.json"
    save_checkpoint(path, p, v)
    d = json.loads(path.read_text())
    assert {"obs_dim", "act_dim", "W1", "b1", "W2", "b2", "W_out", "b_out", "log_std"} <= set(d)
    p2, v2 = load_checkpoint(path)
    for a, b in zip(p.arrays(), p2.arrays()):
        assert np.array_equal(a, b)
    x = rng.standard_normal(3)
    assert np.array_equal(forward_mean(p, x), forward_mean(p2, x))
    assert value_forward(v, x) == value_forward(v2, x)


def test_init_policy_shapes_and_gains(rng):
    p = init_policy(3, 1, rng)
    assert [W.shape for W in p.weights] == [(64, 3), (64, 64), (1, 64)]
    assert np.all(p.log_std == 0)
    # orthogonal rows scaled by the gain
    np.testing.assert_allclose(p.W2 @ p.W2.T, 2 * np.eye(64), atol=1e-12)
    assert np.linalg.norm(p.W_out) == pytest.approx(0.01, rel=1e-12)

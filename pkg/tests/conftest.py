import numpy as np
import pytest

from maxent_lab.policy import PolicyParams, init_policy


def random_policy(rng, obs_dim=3, act_dim=2, hidden=(8, 8), out_gain=1.0):
    """Small random policy with non-zero biases and log_std."""
    p = init_policy(obs_dim, act_dim, rng, hidden=hidden, out_gain=out_gain)
    for b in p.biases:
        b[:] = 0.3 * rng.standard_normal(b.shape)
    p.log_std = 0.3 * rng.standard_normal(act_dim)
    return p


def linear_policy(W, sigma):
    W = np.atleast_2d(np.asarray(W, dtype=float))
    return PolicyParams([W], [None], np.log(np.full(W.shape[0], float(sigma))))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

"""Excess risk under observation noise, estimated with common random numbers.

Every episode owns three random streams derived from ``(base_seed, index)``:
initial-state noise, policy sampling noise and observation noise.  A noisy
and a noiseless estimate built from the same base seed therefore differ only
through the observation channel, which makes ``sigma_y = 0`` reproduce the
clean loss bit for bit.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .policy import PolicyParams, forward_mean

CHUNK = 256


class RateUndefinedError(ValueError):
    pass


@dataclass
class LossEstimate:
    """(mean, stderr, per_episode) triple; blow-up episodes are counted apart."""

    mean: float
    stderr: float
    per_episode: np.ndarray
    n_blowup: int = 0

    def __iter__(self):
        return iter((self.mean, self.stderr, self.per_episode))

    def __getitem__(self, i):
        return tuple(self)[i]


@dataclass
class ExcessRiskReport:
    sigma_y: float
    equilibrium_label: str
    J_noisy: float
    J_noisy_stderr: float
    J_clean: float
    J_clean_stderr: float
    R: float
    R_stderr: float
    R_rate: float
    R_rate_stderr: float
    n_episodes: int
    crn: bool = True
    n_blowup: int = 0
    conditional_samples: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ExcessRiskReport":
        return cls(**d)


def _episode_noise(seed_key, d, act_dim, H):
    init_ss, act_ss, obs_ss = np.random.SeedSequence(seed_key).spawn(3)
    return (
        np.random.default_rng(init_ss).standard_normal(d),
        np.random.default_rng(act_ss).standard_normal((H + 1, act_dim)),
        np.random.default_rng(obs_ss).standard_normal((H + 1, d)),
    )


def _policy_mean(policy, y):
    if isinstance(policy, PolicyParams):
        return forward_mean(policy, y)
    return policy(y)


def _policy_std(policy, act_dim):
    if isinstance(policy, PolicyParams):
        return policy.std
    return np.asarray(getattr(policy, "std", np.zeros(act_dim)), dtype=float)


def simulate(policy, env, x0, z_act, eps_obs, sigma_y, gamma=None, mean_action=False,
             record_states=False):
    """Roll out a batch of episodes in lock-step.

    ``x0`` has shape (n, d); ``z_act`` (n, H+1, act_dim) and ``eps_obs``
    (n, H+1, d) hold the pre-drawn standard normals of each episode.
    Returns (discounted costs, blow-up mask, visited states or None).
    """
    gamma = env.gamma if gamma is None else gamma
    H = env.horizon
    x = np.array(x0, dtype=float)
    n = x.shape[0]
    std = _policy_std(policy, env.act_dim)
    total = np.zeros(n)
    dead = np.zeros(n, bool)
    sentinel = getattr(env, "blowup_cost", 1e3)
    blown_up = getattr(env, "blown_up", None)
    states = np.empty((n, H + 1, x.shape[1])) if record_states else None
    disc = 1.0
    for h in range(H + 1):
        if record_states:
            states[:, h] = x
        y = x + sigma_y * eps_obs[:, h] if sigma_y > 0 else x
        mu = _policy_mean(policy, y)
        a = mu if mean_action else mu + std * z_act[:, h]
        with np.errstate(all="ignore"):
            x_next = env.advance(x, a)
        if blown_up is not None:
            newly = blown_up(x_next) & ~dead
            dead |= newly
        c = np.where(dead, sentinel, env.cost(np.where(dead[:, None], x, x_next), a))
        x = np.where(dead[:, None], x, x_next)
        total += disc * c
        disc *= gamma
    return total, dead, states


def _run(policy, env, sigma_y, keys, x0=None, mean_action=False, record_states=False):
    d, k, H = env.obs_dim, env.act_dim, env.horizon
    sigma_e = env.noise.sigma_e
    costs, dead, states = [], [], []
    for start in range(0, len(keys), CHUNK):
        chunk = keys[start:start + CHUNK]
        draws = [_episode_noise(key, d, k, H) for key in chunk]
        init = np.stack([dr[0] for dr in draws])
        if x0 is None:
            xs = env.x_ref + sigma_e * init if sigma_e > 0 else np.repeat(env.x_ref[None], len(chunk), 0)
        else:
            xs = np.asarray(x0, dtype=float)[start:start + CHUNK]
        c, dm, st = simulate(policy, env, xs, np.stack([dr[1] for dr in draws]),
                             np.stack([dr[2] for dr in draws]), sigma_y, mean_action=mean_action,
                             record_states=record_states)
        costs.append(c)
        dead.append(dm)
        if record_states:
            states.append(st)
    return np.concatenate(costs), np.concatenate(dead), (np.concatenate(states) if record_states else None)


def _base_seed(rng, crn_base_seed):
    if crn_base_seed is not None:
        return int(crn_base_seed)
    if rng is None:
        raise ValueError("need an rng or a crn_base_seed")
    return int(rng.integers(2**62))


def estimate_loss(policy, env, sigma_y, n_episodes, rng, crn_base_seed=None, x0=None,
                  mean_action=False) -> LossEstimate:
    """Monte-Carlo estimate of the discounted loss under observation noise ``sigma_y``."""
    if n_episodes < 1:
        raise ValueError("need at least one episode")
    base = _base_seed(rng, crn_base_seed)
    keys = [(base, i) for i in range(n_episodes)]
    if x0 is not None:
        x0 = np.broadcast_to(np.asarray(x0, dtype=float), (n_episodes, env.obs_dim))
    costs, dead, _ = _run(policy, env, sigma_y, keys, x0=x0, mean_action=mean_action)
    se = float(costs.std(ddof=1) / np.sqrt(n_episodes)) if n_episodes > 1 else float("nan")
    return LossEstimate(float(costs.mean()), se, costs, int(dead.sum()))


def _ratio_stderr(num, den):
    """Delta-method stderr of mean(num)/mean(den) from paired samples."""
    n = len(num)
    if n < 2:
        return float("nan")
    r = num.mean() / den.mean()
    return float(np.std(num - r * den, ddof=1) / (np.sqrt(n) * abs(den.mean())))


def excess_risk(policy, env, sigma_y, n_episodes, rng, crn_base_seed=None,
                mean_action=False, label=None, crn=True) -> ExcessRiskReport:
    """Noisy minus clean loss, plus its rate relative to the clean loss.

    With ``crn=False`` the clean estimate uses an independent seed, so the
    stderr combines the two marginal stderrs instead of the paired one.
    """
    if sigma_y < 0:
        raise ValueError("sigma_y must be >= 0")
    base = _base_seed(rng, crn_base_seed)
    noisy = estimate_loss(policy, env, sigma_y, n_episodes, rng, base, mean_action=mean_action)
    clean_base = base if crn else int(np.random.SeedSequence([base, 1]).generate_state(1, np.uint64)[0] >> 2)
    clean = estimate_loss(policy, env, 0.0, n_episodes, rng, clean_base, mean_action=mean_action)
    if clean.mean < 1e-12:
        raise RateUndefinedError(f"clean loss {clean.mean!r} too small for a rate")
    R = noisy.mean - clean.mean
    if n_episodes < 2:
        R_se = rate_se = float("nan")
    elif crn:
        diff = noisy.per_episode - clean.per_episode
        R_se = float(diff.std(ddof=1) / np.sqrt(n_episodes))
        rate_se = _ratio_stderr(diff, clean.per_episode)
    else:
        R_se = float(np.hypot(noisy.stderr, clean.stderr))
        rate_se = float(abs(noisy.mean / clean.mean) * np.hypot(noisy.stderr / max(noisy.mean, 1e-300),
                                                                 clean.stderr / clean.mean))
    return ExcessRiskReport(
        sigma_y=float(sigma_y),
        equilibrium_label=label or _label(env),
        J_noisy=noisy.mean, J_noisy_stderr=noisy.stderr,
        J_clean=clean.mean, J_clean_stderr=clean.stderr,
        R=R, R_stderr=R_se,
        R_rate=R / clean.mean, R_rate_stderr=rate_se,
        n_episodes=n_episodes, crn=crn, n_blowup=noisy.n_blowup + clean.n_blowup,
    )


def _label(env):
    cfg = getattr(env, "cfg", None)
    if cfg is None:
        return "x0"
    return cfg.init_label or getattr(env, "target").label


@dataclass
class ConditionalResult:
    x0: np.ndarray
    J_noisy: np.ndarray
    J_clean: np.ndarray

    @property
    def R(self):
        return self.J_noisy - self.J_clean

    @property
    def rate(self):
        return self.R / self.J_clean


def conditional_excess_risk(policy, env, sigma_y, rng, x0_samples=None, n_x0=256,
                            episodes_per_x0=4, crn_base_seed=None, mean_action=False):
    """Per-initial-state excess-risk rates, estimated with CRN for each x0.

    Initial states are drawn from N(x_ref, sigma_e^2 I) unless given.
    """
    base = _base_seed(rng, crn_base_seed)
    if x0_samples is None:
        r0 = np.random.default_rng(np.random.SeedSequence([base, 2**31]))
        x0_samples = np.stack([
            env.x_ref + env.noise.sigma_e * r0.standard_normal(env.obs_dim) for _ in range(n_x0)
        ])
    x0_samples = np.atleast_2d(np.asarray(x0_samples, dtype=float))
    if len(x0_samples) < 1:
        raise ValueError("need at least one initial state")
    m = episodes_per_x0
    keys = [(base, k, j) for k in range(len(x0_samples)) for j in range(m)]
    xs = np.repeat(x0_samples, m, axis=0)
    noisy, _, _ = _run(policy, env, sigma_y, keys, x0=xs, mean_action=mean_action)
    clean, _, _ = _run(policy, env, 0.0, keys, x0=xs, mean_action=mean_action)
    return ConditionalResult(
        x0_samples,
        noisy.reshape(-1, m).mean(axis=1),
        clean.reshape(-1, m).mean(axis=1),
    )


class BoxStats(NamedTuple):
    q1: float
    median: float
    q3: float
    whisker_lo: float
    whisker_hi: float
    outliers: np.ndarray


def boxplot_stats(samples) -> BoxStats:
    """Tukey box statistics with 1.5 IQR whiskers and linear-interpolation quantiles."""
    x = np.asarray(samples, dtype=float)
    if x.size < 5:
        raise ValueError("boxplot_stats needs at least 5 samples")
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = x[(x >= lo_fence) & (x <= hi_fence)]
    out = np.sort(x[(x < lo_fence) | (x > hi_fence)])
    return BoxStats(float(q1), float(med), float(q3), float(inside.min()), float(inside.max()), out)


def conditional_csv(result: ConditionalResult, sigma_y) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x0_index", "sigma_y", "rate_sample"])
    for i, r in enumerate(result.rate):
        w.writerow([i, repr(float(sigma_y)), repr(float(r))])
    return buf.getvalue()


def read_conditional_csv(text: str) -> np.ndarray:
    rows = list(csv.DictReader(io.StringIO(text)))
    return np.array([float(r["rate_sample"]) for r in rows])

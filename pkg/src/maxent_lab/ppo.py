"""Clipped-surrogate PPO with GAE and a linearly decaying entropy temperature.

Environments emit costs; the trainer maximizes ``reward = -cost * reward_scale``
plus ``alpha_m * entropy``.  Policy and critic are separate 2x64 tanh MLPs
updated by a single Adam optimizer with global gradient-norm clipping.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .dynamics import Env, EnvConfig
from .policy import (
    LOG_2PI,
    PolicyParams,
    ValueParams,
    init_policy,
    init_value,
    kl_gaussian,
    mlp_backward,
    mlp_forward,
)

log = logging.getLogger(__name__)

TRAINLOG_COLUMNS = [
    "update", "env_steps", "alpha", "mean_episode_cost", "policy_loss",
    "value_loss", "entropy", "dbar_kl", "grad_norm",
]


class TrainingError(RuntimeError):
    pass


@dataclass
class EntropySchedule:
    alpha0: float
    m_quarter: int
    m_total: int

    @classmethod
    def for_budget(cls, alpha0, m_total):
        return cls(alpha0, m_total // 4, m_total)

    def __post_init__(self):
        if self.alpha0 < 0 or not (0 <= self.m_quarter <= self.m_total):
            raise ValueError("need alpha0 >= 0 and 0 <= m_quarter <= m_total")


def alpha_at(s: EntropySchedule, m) -> float:
    if s.m_quarter == 0:
        return 0.0
    return s.alpha0 * max(0.0, 1.0 - m / s.m_quarter)


@dataclass
class TrainConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    seed: int = 0
    alpha0: float = 0.0
    m_total: int = 100_000
    n_steps_per_update: int = 2048
    minibatch_size: int = 64
    n_epochs: int = 10
    learning_rate: float = 3e-4
    clip_range: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    kl_log_states: int = 256
    reward_scale: Optional[float] = None
    hidden: tuple = (64, 64)
    baseline_episodes: int = 64

    def __post_init__(self):
        if isinstance(self.env, dict):
            self.env = EnvConfig.from_dict(self.env)
        self.hidden = tuple(self.hidden)
        if not (0 < self.clip_range < 1):
            raise ValueError("clip_range must lie in (0, 1)")
        for name in ("n_steps_per_update", "minibatch_size", "n_epochs", "kl_log_states"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.m_total < 0 or self.learning_rate <= 0 or self.alpha0 < 0:
            raise ValueError("invalid budget, learning rate or alpha0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        train = dict(d.get("train", {}))
        env = EnvConfig.from_dict(d) if "env" in d else EnvConfig()
        kw = {k: v for k, v in train.items() if k in cls.__dataclass_fields__ and k != "env"}
        if "seed" in d and "seed" not in kw:
            kw["seed"] = d["seed"]
        return cls(env=env, **kw)

    def to_dict(self) -> dict:
        d = self.env.to_dict()
        t = asdict(self)
        t.pop("env")
        t["hidden"] = list(self.hidden)
        d["train"] = t
        return d


@dataclass
class RolloutBatch:
    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    costs: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    rewards: np.ndarray
    last_value: float = 0.0
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    baseline_cost: float = float("nan")
    baseline_stderr: float = float("nan")

    def append(self, **rec):
        self.records.append(rec)

    def column(self, name):
        return np.array([r[name] for r in self.records], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRAINLOG_COLUMNS)
        for r in self.records:
            w.writerow([_fmt(r[c]) for c in TRAINLOG_COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainLog":
        rows = list(csv.DictReader(io.StringIO(text)))
        out = cls()
        for r in rows:
            rec = {c: float(r[c]) for c in TRAINLOG_COLUMNS}
            rec["update"] = int(rec["update"])
            rec["env_steps"] = int(rec["env_steps"])
            out.records.append(rec)
        return out


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def compute_gae(batch: RolloutBatch, gamma, lam, normalize=True):
    """Generalized advantage estimates; ``dones[t]`` marks that step t ended its episode.

    Returns are computed from the raw advantages; normalization (mean 0,
    std 1) is applied afterwards to the advantages only.
    """
    r, v, d = batch.rewards, batch.values, batch.dones.astype(bool)
    n = len(r)
    adv = np.zeros(n)
    last = 0.0
    for t in range(n - 1, -1, -1):
        if d[t]:
            next_v, nonterm = 0.0, 0.0
        else:
            next_v = batch.last_value if t == n - 1 else v[t + 1]
            nonterm = 1.0
        delta = r[t] + gamma * next_v * nonterm - v[t]
        last = delta + gamma * lam * nonterm * last
        adv[t] = last
    returns = adv + v
    if normalize and n > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        # one more pass removes the residual float error of the first
        adv = (adv - adv.mean()) / adv.std()
    batch.advantages, batch.returns = adv, returns
    return adv, returns


class Adam:
    """Adam over a list of arrays, updated in place."""

    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-5):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def ppo_losses(policy: PolicyParams, value: ValueParams, obs, actions, old_log_probs,
               advantages, returns, alpha, clip_range, value_coef):
    """Loss terms and gradients of ``policy_loss - alpha*entropy + value_coef*value_loss``.

    Gradients are returned as lists aligned with ``policy.arrays()`` and
    ``value.arrays()``.
    """
    B = obs.shape[0]
    mu, pcache = mlp_forward(policy, obs)
    var = np.exp(2 * policy.log_std)
    diff = actions - mu
    logp = np.sum(-0.5 * diff * diff / var - policy.log_std - 0.5 * LOG_2PI, axis=1)
    ratio = np.exp(logp - old_log_probs)
    clipped = np.clip(ratio, 1 - clip_range, 1 + clip_range)
    surr1, surr2 = ratio * advantages, clipped * advantages
    policy_loss = -np.mean(np.minimum(surr1, surr2))
    inside = (ratio >= 1 - clip_range) & (ratio <= 1 + clip_range)
    active = inside | (surr1 < surr2)
    dlogp = -np.where(active, ratio * advantages, 0.0) / B

    ent = float(np.sum(0.5 * (LOG_2PI + 1.0) + policy.log_std))
    dmu = dlogp[:, None] * diff / var
    dls = np.sum(dlogp[:, None] * (diff * diff / var - 1.0), axis=0) - alpha
    dWs, dbs = mlp_backward(policy, pcache, dmu)
    pgrads = [a for W, b in zip(dWs, dbs) for a in (W, b) if a is not None] + [dls]

    v, vcache = mlp_forward(value, obs)
    v = v[:, 0]
    value_loss = float(np.mean((returns - v) ** 2))
    dv = (value_coef * 2.0 / B) * (v - returns)
    vW, vb = mlp_backward(value, vcache, dv[:, None])
    vgrads = [a for W, b in zip(vW, vb) for a in (W, b) if a is not None]

    total = policy_loss - alpha * ent + value_coef * value_loss
    return {
        "loss": total,
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": ent,
        "ratio": ratio,
        "clip_active": ~active,
    }, pgrads, vgrads


def ppo_update(policy, value, batch: RolloutBatch, alpha_m, cfg: TrainConfig, opt: Adam, rng):
    """n_epochs of minibatch Adam steps on the clipped surrogate; params change in place."""
    params = policy.arrays() + value.arrays()
    n = len(batch.rewards)
    stats = {"policy_loss": [], "value_loss": [], "grad_norm": []}
    ent = 0.0
    for _ in range(cfg.n_epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = perm[start:start + cfg.minibatch_size]
            out, pg, vg = ppo_losses(
                policy, value, batch.obs[idx], batch.actions[idx], batch.log_probs[idx],
                batch.advantages[idx], batch.returns[idx], alpha_m, cfg.clip_range, cfg.value_coef,
            )
            if not np.isfinite(out["loss"]):
                raise TrainingError(
                    f"non-finite loss: policy={out['policy_loss']} value={out['value_loss']} "
                    f"log_std={policy.log_std}"
                )
            grads = pg + vg
            gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if gnorm > cfg.max_grad_norm:
                scale = cfg.max_grad_norm / (gnorm + 1e-6)
                grads = [g * scale for g in grads]
            opt.step(params, grads)
            stats["policy_loss"].append(out["policy_loss"])
            stats["value_loss"].append(out["value_loss"])
            stats["grad_norm"].append(gnorm)
            ent = out["entropy"]
    return {k: float(np.mean(v)) for k, v in stats.items()} | {"entropy": ent}


def dbar_kl(params_m: PolicyParams, params_m1: PolicyParams, states) -> float:
    """Mean over states of KL(pi_{m+1} || pi_m)."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if states.shape[0] < 1:
        raise ValueError("need at least one state")
    return float(np.mean(kl_gaussian(params_m, params_m1, states)))


def make_env(cfg: TrainConfig) -> Env:
    """Training environment: the configured system without observation noise."""
    env_cfg = EnvConfig(**{**asdict(cfg.env), "sigma_y": 0.0, "gamma": cfg.gamma})
    return Env(env_cfg)


def init_models(cfg: TrainConfig, env: Env, rng):
    policy = init_policy(env.obs_dim, env.act_dim, rng, cfg.hidden,
                         obs_shift=env.target.x_star, obs_scale=env.state_scale)
    value = init_value(env.obs_dim, rng, cfg.hidden,
                       obs_shift=env.target.x_star, obs_scale=env.state_scale)
    return policy, value


def collect_rollout(policy, value, env: Env, n, state, rng_act, rng_env, reward_scale, gamma):
    """Run ``n`` steps; ``state`` is a dict carrying x, h and the running episode cost."""
    d = env.obs_dim
    obs = np.empty((n, d))
    actions = np.empty((n, env.act_dim))
    logps, costs, values, dones = np.empty(n), np.empty(n), np.empty(n), np.zeros(n, bool)
    finished = []
    std, log_std = policy.std, policy.log_std
    for t in range(n):
        y = state["x"]  # noiseless channel during training
        obs[t] = y
        mu, _ = mlp_forward(policy, y[None, :])
        mu = mu[0]
        z = rng_act.standard_normal(env.act_dim)
        a = mu + std * z
        actions[t] = a
        logps[t] = np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI)
        v, _ = mlp_forward(value, y[None, :])
        values[t] = v[0, 0]
        with np.errstate(all="ignore"):
            x_next = env.advance(y, a)
        if env.blown_up(x_next):
            c = env.blowup_cost
            remaining = env.horizon - state["h"]
            # sentinel cost for the steps the episode can no longer take
            state["cost"] += state["disc"] * c * (1 - gamma ** (remaining + 1)) / (1 - gamma)
            costs[t] = c
            dones[t] = True
        else:
            c = float(env.cost(x_next, a))
            costs[t] = c
            state["cost"] += state["disc"] * c
            state["x"] = x_next
            state["h"] += 1
            state["disc"] *= gamma
            dones[t] = state["h"] > env.horizon
        if dones[t]:
            finished.append(state["cost"])
            s0 = env.reset(rng_env)
            state.update(x=s0.x, h=0, cost=0.0, disc=1.0)
    last_v, _ = mlp_forward(value, state["x"][None, :])
    batch = RolloutBatch(obs, actions, logps, costs, values, dones, -costs * reward_scale,
                         last_value=float(last_v[0, 0]))
    return batch, finished


def train(cfg: TrainConfig, baseline=True):
    """Train one policy; returns (policy, value, TrainLog)."""
    from .robustness import estimate_loss

    ss = np.random.SeedSequence(cfg.seed)
    rng_init, rng_env, rng_act, rng_shuffle, rng_eval = [np.random.default_rng(s) for s in ss.spawn(5)]
    env = make_env(cfg)
    policy, value = init_models(cfg, env, rng_init)
    tlog = TrainLog()
    if baseline and cfg.baseline_episodes > 0:
        m, se, _ = estimate_loss(policy, env, 0.0, cfg.baseline_episodes, rng_eval,
                                 crn_base_seed=cfg.seed)
        tlog.baseline_cost, tlog.baseline_stderr = m, se
    if cfg.m_total == 0:
        return policy, value, tlog

    reward_scale = cfg.reward_scale if cfg.reward_scale is not None else 1.0 / env.state_scale**2
    sched = EntropySchedule.for_budget(cfg.alpha0, cfg.m_total)
    opt = Adam(policy.arrays() + value.arrays(), lr=cfg.learning_rate)
    s0 = env.reset(rng_env)
    state = {"x": s0.x, "h": 0, "cost": 0.0, "disc": 1.0}
    env_steps, update = 0, 0
    while env_steps < cfg.m_total:
        n = min(cfg.n_steps_per_update, cfg.m_total - env_steps)
        alpha = alpha_at(sched, env_steps)
        batch, finished = collect_rollout(policy, value, env, n, state, rng_act, rng_env,
                                          reward_scale, cfg.gamma)
        env_steps += n
        compute_gae(batch, cfg.gamma, cfg.gae_lambda)
        old = policy.copy()
        stats = ppo_update(policy, value, batch, alpha, cfg, opt, rng_shuffle)
        k = min(cfg.kl_log_states, n)
        idx = np.linspace(0, n - 1, k).astype(int)
        kl = dbar_kl(old, policy, batch.obs[idx])
        tlog.append(
            update=update, env_steps=env_steps, alpha=alpha,
            mean_episode_cost=float(np.mean(finished)) if finished else float("nan"),
            policy_loss=stats["policy_loss"], value_loss=stats["value_loss"],
            entropy=stats["entropy"], dbar_kl=kl, grad_norm=stats["grad_norm"],
        )
        log.info("update %d steps %d alpha %.4g cost %.4g kl %.3g", update, env_steps, alpha,
                 tlog.records[-1]["mean_episode_cost"], kl)
        update += 1
    return policy, value, tlog

"""Complexity measures of a trained Gaussian policy.

Norm-based measures act on the mean network only (log_std excluded):
the p-norm of the flattened parameter vector and the product over layers
of the weight matrices' operator norms (biases excluded).  Flatness is
measured by the trace of the conditional Fisher information of theta_mu,
estimated both in closed form and by Monte-Carlo Hessians.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .policy import (
    LOG_2PI,
    PolicyParams,
    forward_mean,
    mean_jacobian,
    mean_jacobian_row_norms,
    mlp_deltas,
    mlp_forward,
    per_sample_grad_log_prob_mean,
)

_trapezoid = getattr(np, "trapezoid", None) or np.trapz

VECTOR_PS = ("1", "2", "inf")
OPERATOR_PS = ("1", "2", "inf", "F")


class PowerIterationError(RuntimeError):
    pass


def _p_key(p) -> str:
    if p in (1, "1"):
        return "1"
    if p in (2, "2"):
        return "2"
    if p in (np.inf, float("inf"), "inf", "∞"):
        return "inf"
    if p in ("F", "fro", "f"):
        return "F"
    raise ValueError(f"unsupported norm order {p!r}")


def vector_norm(theta, p) -> float:
    key = _p_key(p)
    if key == "F":
        raise ValueError("Frobenius norm is not defined for the flat parameter vector")
    theta = np.ravel(np.asarray(theta, dtype=float))
    if key == "1":
        return float(np.sum(np.abs(theta)))
    if key == "2":
        return float(np.sqrt(np.sum(theta * theta)))
    return float(np.max(np.abs(theta), initial=0.0))


def spectral_norm(W, tol=1e-10, max_iter=10_000) -> float:
    """Largest singular value by power iteration on W^T W from the all-ones vector.

    Stops once the eigen-residual falls below ``tol`` relative to the estimate,
    or once the remaining error of the Rayleigh quotient, extrapolated from a
    stable geometric decay of its increments, falls below ``tol / 100``.  The
    second test matters when the top two singular values nearly coincide: the
    vector then converges far slower than the value.
    """
    W = np.asarray(W, dtype=float)
    A = W.T @ W
    v = np.ones(A.shape[0]) / np.sqrt(A.shape[0])
    lam = prev = 0.0
    step = rho_prev = np.nan
    res = np.inf
    for it in range(max_iter):
        w = A @ v
        lam = float(v @ w)
        res = float(np.linalg.norm(w - lam * v))
        if lam == 0.0 or res <= tol * lam:
            return math.sqrt(max(lam, 0.0))
        if it > 0:
            d = lam - prev
            rho = d / step if step > 0 else np.nan
            stable = abs(rho - rho_prev) <= 0.05 * (1 - rho)
            if 0 <= rho < 1 and stable and d * rho / (1 - rho) <= 1e-2 * tol * lam:
                return math.sqrt(lam)
            step, rho_prev = d, rho
        prev = lam
        v = w / np.linalg.norm(w)
    raise PowerIterationError(f"power iteration did not converge: residual {res:.3e}, estimate {lam:.6e}")


def operator_norm(W, p) -> float:
    key = _p_key(p)
    W = np.asarray(W, dtype=float)
    if key == "1":
        return float(np.max(np.sum(np.abs(W), axis=0), initial=0.0))
    if key == "inf":
        return float(np.max(np.sum(np.abs(W), axis=1), initial=0.0))
    if key == "F":
        return float(np.sqrt(np.sum(W * W)))
    return spectral_norm(W)


def layer_product_norm(params: PolicyParams, p) -> float:
    out = 1.0
    for W in params.weights:
        out *= operator_norm(W, p)
    return out


# ---------------------------------------------------------------- Fisher information


def fim_trace_closed_form(params: PolicyParams, states):
    """Per-state Tr I(theta_mu; x) = sum_j ||grad mu_j(x)||^2 / sigma_j^2 and their mean."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if states.shape[0] == 0:
        raise ValueError("need at least one state")
    rows = mean_jacobian_row_norms(params, states)
    samples = rows @ np.exp(-2 * params.log_std)
    return float(samples.mean()), samples


def _coordinate_table(params: PolicyParams):
    """Map flat theta_mu index -> (layer, is_bias, row, col)."""
    table = []
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        r, c = np.unravel_index(np.arange(W.size), W.shape)
        table.extend((l, False, int(i), int(j)) for i, j in zip(r, c))
        if b is not None:
            table.extend((l, True, i, 0) for i in range(b.size))
    return table


def _score_coordinate(params: PolicyParams, obs, actions, coord):
    """Per-sample d log pi / d theta_i for one coordinate of theta_mu."""
    l, is_bias, r, c = coord
    mu, cache = mlp_forward(params, obs)
    dmu = (actions - mu) * np.exp(-2 * params.log_std)
    d = mlp_deltas(params, cache, dmu)[l]
    if is_bias:
        return d[:, r]
    return d[:, r] * cache[0][l][:, c]


def fim_trace_mc(params: PolicyParams, states, n_action_samples, rng, h=1e-4):
    """Monte-Carlo -E[Tr hess_{theta_mu} log pi(U|X)], U ~ pi(.|X), X uniform over ``states``.

    Diagonal Hessian entries come from central differences of the score.
    Returns (mean, stderr) with the standard error of the action sampling.
    """
    if n_action_samples < 100:
        raise ValueError("need at least 100 action samples per state")
    states = np.atleast_2d(np.asarray(states, dtype=float))
    S, n = states.shape[0], n_action_samples
    mu = forward_mean(params, states)
    acts = mu[:, None, :] + params.std * rng.standard_normal((S, n, params.act_dim))
    obs = np.repeat(states, n, axis=0)
    acts = acts.reshape(S * n, -1)
    theta = params.flat_mean()
    table = _coordinate_table(params)
    diag_sum = np.zeros(S * n)
    for i, coord in enumerate(table):
        tp = theta.copy()
        tp[i] += h
        tm = theta.copy()
        tm[i] -= h
        gp = _score_coordinate(params.with_flat_mean(tp), obs, acts, coord)
        gm = _score_coordinate(params.with_flat_mean(tm), obs, acts, coord)
        diag_sum += (gp - gm) / (2 * h)
    samples = (-diag_sum).reshape(S, n)
    per_state_mean = samples.mean(axis=1)
    per_state_var = samples.var(axis=1, ddof=1)
    stderr = math.sqrt(per_state_var.sum() / n) / S
    return float(per_state_mean.mean()), stderr


# ---------------------------------------------------------------- objective Hessian


@dataclass
class HessianEstimate:
    matrix: Optional[np.ndarray]
    stderr: Optional[np.ndarray]
    trace: float
    trace_stderr: float


def _rollout_batch(policy, env, n, rng, gamma):
    """Noiseless trajectories: returns obs (n, H+1, d), actions (n, H+1, k), discounted cost (n,)."""
    H = env.horizon
    x = env.x_ref + env.noise.sigma_e * rng.standard_normal((n, env.obs_dim))
    obs = np.empty((n, H + 1, env.obs_dim))
    acts = np.empty((n, H + 1, env.act_dim))
    C = np.zeros(n)
    disc = 1.0
    for h in range(H + 1):
        obs[:, h] = x
        a = forward_mean(policy, x) + policy.std * rng.standard_normal((n, env.act_dim))
        acts[:, h] = a
        x_next = env.advance(x, a)
        C += disc * env.cost(x_next, a)
        x = x_next
        disc *= gamma
    return obs, acts, C


def _log_prob_rows(policy, obs, acts):
    mu = forward_mean(policy, obs)
    z = (acts - mu) / policy.std
    return np.sum(-0.5 * z * z - policy.log_std - 0.5 * LOG_2PI, axis=-1)


def _mean_hessians(policy, obs, h=1e-5):
    """Per-sample second derivatives of mu wrt theta_mu, (B, act, P, P), by differencing Jacobians."""
    theta = policy.flat_mean()
    P = theta.size
    out = np.empty((obs.shape[0], policy.act_dim, P, P))
    for i in range(P):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        out[:, :, :, i] = (mean_jacobian(policy.with_flat_mean(tp), obs)
                           - mean_jacobian(policy.with_flat_mean(tm), obs)) / (2 * h)
    return out


def objective_hessian_estimate(policy: PolicyParams, env, n_trajectories, rng, gamma=None,
                               max_params=64, n_probes=16, chunk=20_000, eps=1e-4):
    """Score-function estimate of the theta_mu Hessian of the discounted loss.

    Uses E[C(tau) (g g^T + sum_h hess log pi_h)] with C the discounted cost
    and g the summed score.  Above ``max_params`` parameters only the trace
    is estimated, with Rademacher (Hutchinson) probes.
    """
    gamma = getattr(env, "gamma", 1.0) if gamma is None else gamma
    P = policy.n_mean_params
    var = np.exp(2 * policy.log_std)
    if P <= max_params:
        s1 = np.zeros((P, P))
        s2 = np.zeros((P, P))
        tr1 = tr2 = 0.0
        done = 0
        T = env.horizon + 1
        step = max(1, min(chunk, int(2e7) // (T * P * P * policy.act_dim)))
        while done < n_trajectories:
            m = min(step, n_trajectories - done)
            obs, acts, C = _rollout_batch(policy, env, m, rng, gamma)
            flat_obs = obs.reshape(m * T, -1)
            flat_act = acts.reshape(m * T, -1)
            scores = per_sample_grad_log_prob_mean(policy, flat_obs, flat_act).reshape(m, T, P)
            g = scores.sum(axis=1)
            J = mean_jacobian(policy, flat_obs)  # (mT, k, P)
            resid = (flat_act - forward_mean(policy, flat_obs)) / var
            hess = -np.einsum("bkp,bkq,k->bpq", J, J, 1.0 / var)
            if len(policy.weights) > 1:  # a linear mean has zero curvature
                hess += np.einsum("bk,bkpq->bpq", resid, _mean_hessians(policy, flat_obs))
            hsum = hess.reshape(m, T, P, P).sum(axis=1)
            X = C[:, None, None] * (g[:, :, None] * g[:, None, :] + hsum)
            s1 += X.sum(axis=0)
            s2 += (X * X).sum(axis=0)
            t = np.trace(X, axis1=1, axis2=2)
            tr1 += t.sum()
            tr2 += (t * t).sum()
            done += m
        n = n_trajectories
        mean = s1 / n
        se = np.sqrt(np.maximum(s2 / n - mean**2, 0.0) / max(n - 1, 1))
        tmean = tr1 / n
        tse = math.sqrt(max(tr2 / n - tmean**2, 0.0) / max(n - 1, 1))
        return HessianEstimate(mean, se, float(tmean), tse)

    # trace only: v^T H v = E[C ((g.v)^2 + sum_h v^T hess log pi_h v)]
    theta = policy.flat_mean()
    vals = []
    done = 0
    while done < n_trajectories:
        m = min(chunk, n_trajectories - done)
        obs, acts, C = _rollout_batch(policy, env, m, rng, gamma)
        T = obs.shape[1]
        flat_obs = obs.reshape(m * T, -1)
        flat_act = acts.reshape(m * T, -1)
        scores = per_sample_grad_log_prob_mean(policy, flat_obs, flat_act).reshape(m, T, P)
        g = scores.sum(axis=1)
        l0 = _log_prob_rows(policy, flat_obs, flat_act)
        est = np.zeros(m)
        for _ in range(n_probes):
            v = rng.choice([-1.0, 1.0], size=P)
            lp = _log_prob_rows(policy.with_flat_mean(theta + eps * v), flat_obs, flat_act)
            lm = _log_prob_rows(policy.with_flat_mean(theta - eps * v), flat_obs, flat_act)
            curv = ((lp - 2 * l0 + lm) / eps**2).reshape(m, T).sum(axis=1)
            est += C * ((g @ v) ** 2 + curv)
        vals.append(est / n_probes)
        done += m
    vals = np.concatenate(vals)
    return HessianEstimate(None, None, float(vals.mean()),
                           float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else float("nan"))


# ---------------------------------------------------------------- distribution summaries


@dataclass
class KDEResult:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    degenerate: bool = False


def silverman_bandwidth(x) -> float:
    x = np.asarray(x, dtype=float)
    sd = x.std(ddof=1)
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34)
    if spread <= 0:
        spread = sd
    return 0.9 * spread * x.size ** (-0.2)


def kde(samples, bandwidth=None, n_grid=512) -> KDEResult:
    """Gaussian KDE on a grid over [min - 3b, max + 3b], normalized on that grid."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 10:
        raise ValueError("kde needs at least 10 samples")
    degenerate = bool(np.ptp(x) == 0)
    if degenerate:
        b = max(abs(x[0]), 1.0) * 1e-3
    else:
        b = float(bandwidth) if bandwidth is not None else silverman_bandwidth(x)
    grid = np.linspace(x.min() - 3 * b, x.max() + 3 * b, n_grid)
    dens = np.zeros(n_grid)
    for start in range(0, x.size, 2048):
        u = (grid[None, :] - x[start:start + 2048, None]) / b
        dens += np.exp(-0.5 * u * u).sum(axis=0)
    dens /= x.size * b * np.sqrt(2 * np.pi)
    mass = _trapezoid(dens, grid)
    if mass > 0:
        dens = dens / mass
    return KDEResult(grid, dens, float(b), degenerate)


def skewness_kurtosis(samples):
    """Sample skewness and excess kurtosis from standardized central moments."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 4:
        raise ValueError("need at least 4 samples")
    d = x - x.mean()
    m2 = np.mean(d**2)
    if m2 == 0:
        raise ValueError("zero variance")
    return float(np.mean(d**3) / m2**1.5), float(np.mean(d**4) / m2**2 - 3.0)


# ---------------------------------------------------------------- reports


@dataclass
class StateSample:
    states: np.ndarray
    source_run: str = ""


def sample_visitation(policy, env, n_states, rng, n_episodes=None, source_run="") -> StateSample:
    """Uniform subsample of the states visited by noiseless rollouts of ``policy``."""
    from .robustness import _run

    per_ep = env.horizon + 1
    if n_episodes is None:
        n_episodes = max(4, 2 * math.ceil(n_states / per_ep))
    base = int(rng.integers(2**62))
    _, _, st = _run(policy, env, 0.0, [(base, i) for i in range(n_episodes)], record_states=True)
    flat = st.reshape(-1, st.shape[-1])
    idx = np.sort(rng.choice(flat.shape[0], size=min(n_states, flat.shape[0]), replace=False))
    return StateSample(flat[idx], source_run)


@dataclass
class ComplexityReport:
    vector_norms: dict
    layer_products: dict
    fim_trace_mean: float
    fim_trace_samples: list
    kde_grid: list
    kde_density: list
    kde_bandwidth: float
    n_states: int
    fim_skewness: float = float("nan")
    fim_excess_kurtosis: float = float("nan")
    fim_trace_median: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ComplexityReport":
        return cls(**d)

    def flat_row(self) -> dict:
        row = {f"vector_norm_p{p}": self.vector_norms[p] for p in VECTOR_PS}
        row.update({f"layer_product_p{p}": self.layer_products[p] for p in OPERATOR_PS})
        row["fim_trace_mean"] = self.fim_trace_mean
        row["fim_trace_median"] = self.fim_trace_median
        row["fim_skewness"] = self.fim_skewness
        row["fim_excess_kurtosis"] = self.fim_excess_kurtosis
        row["n_states"] = self.n_states
        return row

    def to_csv(self) -> str:
        row = self.flat_row()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(row))
        w.writerow([repr(float(v)) if not isinstance(v, int) else str(v) for v in row.values()])
        return buf.getvalue()


def measure(params: PolicyParams, states) -> ComplexityReport:
    states = np.atleast_2d(np.asarray(states, dtype=float))
    theta = params.flat_mean()
    mean, samples = fim_trace_closed_form(params, states)
    if samples.size >= 10:
        k = kde(samples)
        grid, dens, bw = k.grid.tolist(), k.density.tolist(), k.bandwidth
    else:
        grid, dens, bw = [], [], float("nan")
    try:
        skew, kurt = skewness_kurtosis(samples)
    except ValueError:
        skew, kurt = float("nan"), float("nan")
    return ComplexityReport(
        vector_norms={p: vector_norm(theta, p) for p in VECTOR_PS},
        layer_products={p: layer_product_norm(params, p) for p in OPERATOR_PS},
        fim_trace_mean=mean,
        fim_trace_samples=samples.tolist(),
        kde_grid=grid,
        kde_density=dens,
        kde_bandwidth=bw,
        n_states=int(states.shape[0]),
        fim_skewness=skew,
        fim_excess_kurtosis=kurt,
        fim_trace_median=float(np.median(samples)),
    )

"""Diagonal-Gaussian policy with a tanh MLP mean and hand-written backprop.

The mean network is ``mu(y) = W_out tanh(W2 tanh(W1 z + b1) + b2) + b_out``
with ``z = (y - obs_shift) / obs_scale`` (fixed, non-learnable constants).
The covariance is ``diag(exp(log_std))**2`` and does not depend on the state.

Layers are stored as lists so that test harnesses can build a single-layer
(linear) policy; the default architecture is depth 2, width 64.  A bias
entry may be ``None`` for weight-only layers.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

LOG_2PI = np.log(2 * np.pi)


@dataclass
class PolicyParams:
    weights: list
    biases: list
    log_std: np.ndarray
    obs_shift: Optional[np.ndarray] = None
    obs_scale: float = 1.0
    activation: str = "tanh"

    @property
    def obs_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def act_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    # named accessors for the default depth-2 layout
    @property
    def W1(self):
        return self.weights[0]

    @property
    def b1(self):
        return self.biases[0]

    @property
    def W2(self):
        return self.weights[1]

    @property
    def b2(self):
        return self.biases[1]

    @property
    def W_out(self):
        return self.weights[-1]

    @property
    def b_out(self):
        return self.biases[-1]

    def mean_arrays(self) -> list:
        """theta_mu in canonical order W1, b1, W2, b2, ..., W_out, b_out."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.append(W)
            if b is not None:
                out.append(b)
        return out

    def arrays(self) -> list:
        return self.mean_arrays() + [self.log_std]

    def flat_mean(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.mean_arrays()])

    @property
    def n_mean_params(self) -> int:
        return sum(a.size for a in self.mean_arrays())

    def with_flat_mean(self, theta) -> "PolicyParams":
        """Copy with theta_mu replaced by the flat vector ``theta``."""
        theta = np.asarray(theta, dtype=float)
        ws, bs, i = [], [], 0
        for W, b in zip(self.weights, self.biases):
            ws.append(theta[i:i + W.size].reshape(W.shape))
            i += W.size
            if b is None:
                bs.append(None)
            else:
                bs.append(theta[i:i + b.size].reshape(b.shape))
                i += b.size
        if i != theta.size:
            raise ValueError("flat vector has the wrong length")
        return PolicyParams(ws, bs, self.log_std.copy(), self.obs_shift, self.obs_scale, self.activation)

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            [W.copy() for W in self.weights],
            [None if b is None else b.copy() for b in self.biases],
            self.log_std.copy(),
            None if self.obs_shift is None else np.array(self.obs_shift),
            self.obs_scale,
            self.activation,
        )

    # -- checkpoint schema
    def layer_names(self):
        n = len(self.weights)
        return [f"{i + 1}" for i in range(n - 1)] + ["_out"]

    def to_dict(self) -> dict:
        d = {"obs_dim": self.obs_dim, "act_dim": self.act_dim}
        for name, W, b in zip(self.layer_names(), self.weights, self.biases):
            d["W" + name] = W.tolist()
            d["b" + name] = None if b is None else b.tolist()
        d["log_std"] = self.log_std.tolist()
        d["obs_shift"] = None if self.obs_shift is None else np.asarray(self.obs_shift).tolist()
        d["obs_scale"] = self.obs_scale
        d["activation"] = self.activation
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyParams":
        hidden = sorted(int(k[1:]) for k in d if k.startswith("W") and k[1:].isdigit())
        names = [str(i) for i in hidden] + ["_out"]
        ws = [np.atleast_2d(np.asarray(d["W" + n], dtype=float)) for n in names]
        bs = [None if d.get("b" + n) is None else np.asarray(d["b" + n], dtype=float) for n in names]
        p = cls(
            ws,
            bs,
            np.asarray(d["log_std"], dtype=float),
            None if d.get("obs_shift") is None else np.asarray(d["obs_shift"], dtype=float),
            d.get("obs_scale", 1.0),
            d.get("activation", "tanh"),
        )
        if p.obs_dim != d["obs_dim"] or p.act_dim != d["act_dim"]:
            raise ValueError("checkpoint dimensions do not match its arrays")
        return p


@dataclass
class ValueParams:
    """Critic network: same MLP layout with a scalar output, no log_std."""

    weights: list
    biases: list
    obs_shift: Optional[np.ndarray] = None
    obs_scale: float = 1.0
    activation: str = "tanh"

    def arrays(self) -> list:
        return [a for W, b in zip(self.weights, self.biases) for a in (W, b) if a is not None]

    def copy(self) -> "ValueParams":
        return ValueParams(
            [W.copy() for W in self.weights],
            [None if b is None else b.copy() for b in self.biases],
            self.obs_shift, self.obs_scale, self.activation,
        )

    def to_dict(self) -> dict:
        return {
            "weights": [W.tolist() for W in self.weights],
            "biases": [None if b is None else b.tolist() for b in self.biases],
            "obs_shift": None if self.obs_shift is None else np.asarray(self.obs_shift).tolist(),
            "obs_scale": self.obs_scale,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ValueParams":
        return cls(
            [np.asarray(W, dtype=float) for W in d["weights"]],
            [None if b is None else np.asarray(b, dtype=float) for b in d["biases"]],
            None if d.get("obs_shift") is None else np.asarray(d["obs_shift"], dtype=float),
            d.get("obs_scale", 1.0),
            d.get("activation", "tanh"),
        )


@dataclass
class GradBuffer:
    """Gradient slots mirroring :class:`PolicyParams` (mean layers + log_std)."""

    weights: list
    biases: list
    log_std: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def zeros_like(cls, p) -> "GradBuffer":
        return cls(
            [np.zeros_like(W) for W in p.weights],
            [None if b is None else np.zeros_like(b) for b in p.biases],
            np.zeros_like(p.log_std) if hasattr(p, "log_std") else np.zeros(0),
        )

    def mean_arrays(self) -> list:
        return [a for W, b in zip(self.weights, self.biases) for a in (W, b) if a is not None]

    def arrays(self) -> list:
        return self.mean_arrays() + [self.log_std]

    def flat_mean(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.mean_arrays()])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def zero(self):
        for a in self.arrays():
            a[...] = 0.0


# ---------------------------------------------------------------- init


def orthogonal(shape, gain, rng):
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_policy(obs_dim, act_dim, rng, hidden=(64, 64), obs_shift=None, obs_scale=1.0,
                log_std_init=0.0, out_gain=0.01) -> PolicyParams:
    sizes = [obs_dim, *hidden, act_dim]
    ws, bs = [], []
    for i in range(len(sizes) - 1):
        gain = np.sqrt(2.0) if i < len(sizes) - 2 else out_gain
        ws.append(orthogonal((sizes[i + 1], sizes[i]), gain, rng))
        bs.append(np.zeros(sizes[i + 1]))
    return PolicyParams(ws, bs, np.full(act_dim, float(log_std_init)),
                        None if obs_shift is None else np.asarray(obs_shift, dtype=float), obs_scale)


def init_value(obs_dim, rng, hidden=(64, 64), obs_shift=None, obs_scale=1.0) -> ValueParams:
    sizes = [obs_dim, *hidden, 1]
    ws, bs = [], []
    for i in range(len(sizes) - 1):
        gain = np.sqrt(2.0) if i < len(sizes) - 2 else 1.0
        ws.append(orthogonal((sizes[i + 1], sizes[i]), gain, rng))
        bs.append(np.zeros(sizes[i + 1]))
    return ValueParams(ws, bs, None if obs_shift is None else np.asarray(obs_shift, dtype=float), obs_scale)


# ---------------------------------------------------------------- MLP core


def _prep(net, obs):
    z = np.asarray(obs, dtype=float)
    if net.obs_shift is not None:
        z = z - net.obs_shift
    if np.any(np.asarray(net.obs_scale) != 1.0):
        z = z / net.obs_scale
    return z


def mlp_forward(net, obs):
    """Forward pass on a batch ``obs`` of shape (B, obs_dim).

    Returns the output and a cache with each layer's input and the tanh
    derivative of each hidden pre-activation.
    """
    h = _prep(net, obs)
    if h.shape[-1] != net.weights[0].shape[1]:
        raise ValueError(f"observation dim {h.shape[-1]} != {net.weights[0].shape[1]}")
    inputs, dacts = [], []
    n = len(net.weights)
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        a = h @ W.T
        if b is not None:
            a = a + b
        if i < n - 1:
            if net.activation == "tanh":
                h = np.tanh(a)
                dacts.append(1.0 - h * h)
            else:
                h = a
                dacts.append(np.ones_like(a))
        else:
            h = a
    return h, (inputs, dacts)


def mlp_deltas(net, cache, dout):
    """Back-propagate ``dout`` (B, out) and return each layer's output delta."""
    inputs, dacts = cache
    deltas = [None] * len(net.weights)
    d = dout
    for i in range(len(net.weights) - 1, -1, -1):
        deltas[i] = d
        if i > 0:
            d = (d @ net.weights[i]) * dacts[i - 1]
    return deltas


def mlp_backward(net, cache, dout):
    """Parameter gradients summed over the batch: lists (dW, db)."""
    inputs, _ = cache
    deltas = mlp_deltas(net, cache, dout)
    dWs = [d.T @ h for d, h in zip(deltas, inputs)]
    dbs = [None if b is None else d.sum(axis=0) for d, b in zip(deltas, net.biases)]
    return dWs, dbs


def mlp_per_sample_sq_norms(net, cache, dout):
    """Squared norm of each sample's parameter gradient, without materializing it."""
    inputs, _ = cache
    deltas = mlp_deltas(net, cache, dout)
    total = 0.0
    for d, h, b in zip(deltas, inputs, net.biases):
        dd = np.sum(d * d, axis=-1)
        hh = np.sum(h * h, axis=-1)
        total = total + dd * (hh + (1.0 if b is not None else 0.0))
    return total


def mlp_per_sample_grads(net, cache, dout):
    """Per-sample flat gradients of theta_mu, shape (B, n_params)."""
    inputs, _ = cache
    deltas = mlp_deltas(net, cache, dout)
    parts = []
    B = dout.shape[0]
    for d, h, b in zip(deltas, inputs, net.biases):
        parts.append((d[:, :, None] * h[:, None, :]).reshape(B, -1))
        if b is not None:
            parts.append(d)
    return np.concatenate(parts, axis=1)


def _batch(obs):
    obs = np.asarray(obs, dtype=float)
    return (obs[None, :], True) if obs.ndim == 1 else (obs, False)


# ---------------------------------------------------------------- policy API


def forward_mean(p: PolicyParams, obs):
    x, single = _batch(obs)
    mu, _ = mlp_forward(p, x)
    return mu[0] if single else mu


def log_prob(p: PolicyParams, obs, action):
    mu = forward_mean(p, obs)
    a = np.asarray(action, dtype=float)
    std = p.std
    z = (a - mu) / std
    return np.sum(-0.5 * z * z - p.log_std - 0.5 * LOG_2PI, axis=-1)


def sample_action(p: PolicyParams, obs, rng):
    mu = forward_mean(p, obs)
    z = rng.standard_normal(mu.shape)
    a = mu + p.std * z
    return a, log_prob(p, obs, a)


def entropy(p: PolicyParams) -> float:
    return float(np.sum(0.5 * (LOG_2PI + 1.0) + p.log_std))


def score_terms(p: PolicyParams, mu, action):
    """d log pi / d mu and d log pi / d log_std for a batch."""
    var = np.exp(2 * p.log_std)
    diff = np.asarray(action, dtype=float) - mu
    return diff / var, diff * diff / var - 1.0


def grad_log_prob(p: PolicyParams, obs, action) -> GradBuffer:
    """Exact gradient of log pi(action | obs) w.r.t. every parameter.

    Batched inputs give the gradient of the summed log-probabilities.
    """
    x, _ = _batch(obs)
    a = np.asarray(action, dtype=float).reshape(x.shape[0], -1)
    mu, cache = mlp_forward(p, x)
    dmu, dls = score_terms(p, mu, a)
    dWs, dbs = mlp_backward(p, cache, dmu)
    return GradBuffer(dWs, dbs, dls.sum(axis=0))


def per_sample_grad_log_prob_mean(p: PolicyParams, obs, action):
    """Per-sample gradients of log pi w.r.t. theta_mu, shape (B, n_mean_params)."""
    x, _ = _batch(obs)
    a = np.asarray(action, dtype=float).reshape(x.shape[0], -1)
    mu, cache = mlp_forward(p, x)
    dmu, _ = score_terms(p, mu, a)
    return mlp_per_sample_grads(p, cache, dmu)


def mean_jacobian_row_norms(p: PolicyParams, obs):
    """||grad_{theta_mu} mu_j(obs)||^2 for every output j (one reverse pass each)."""
    x, single = _batch(obs)
    _, cache = mlp_forward(p, x)
    out = np.empty((x.shape[0], p.act_dim))
    for j in range(p.act_dim):
        e = np.zeros((x.shape[0], p.act_dim))
        e[:, j] = 1.0
        out[:, j] = mlp_per_sample_sq_norms(p, cache, e)
    return out[0] if single else out


def mean_jacobian(p: PolicyParams, obs):
    """Per-sample Jacobian d mu / d theta_mu, shape (B, act_dim, n_mean_params)."""
    x, _ = _batch(obs)
    _, cache = mlp_forward(p, x)
    rows = []
    for j in range(p.act_dim):
        e = np.zeros((x.shape[0], p.act_dim))
        e[:, j] = 1.0
        rows.append(mlp_per_sample_grads(p, cache, e))
    return np.stack(rows, axis=1)


def kl_gaussian(p: PolicyParams, q: PolicyParams, obs):
    """KL(pi_q || pi_p) at ``obs``: the later policy ``q`` is the reference measure.

    Equals E_{U ~ pi_q}[log pi_q(U) - log pi_p(U)], summed over action dims.
    """
    mp, mq = forward_mean(p, obs), forward_mean(q, obs)
    vp, vq = np.exp(2 * p.log_std), np.exp(2 * q.log_std)
    kl = p.log_std - q.log_std + (vq + (mq - mp) ** 2) / (2 * vp) - 0.5
    return np.sum(kl, axis=-1)


def value_forward(v: ValueParams, obs):
    x, single = _batch(obs)
    out, _ = mlp_forward(v, x)
    return out[0, 0] if single else out[:, 0]


def save_checkpoint(path, policy: PolicyParams, value: ValueParams | None = None, extra=None):
    d = policy.to_dict()
    if value is not None:
        d["value"] = value.to_dict()
    if extra:
        d.update(extra)
    with open(path, "w") as f:
        json.dump(d, f)


def load_checkpoint(path):
    with open(path) as f:
        d = json.load(f)
    value = ValueParams.from_dict(d["value"]) if d.get("value") else None
    return PolicyParams.from_dict(d), value

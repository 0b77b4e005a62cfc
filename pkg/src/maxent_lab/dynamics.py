"""Controlled chaotic systems with a Gaussian observation channel.

Two systems are provided: the Lorenz-63 system (RK4, scalar control on the
second component) and the Kuramoto-Sivashinsky equation on a periodic domain
(ETDRK4, Gaussian actuators).  All state arrays may carry leading batch
dimensions; the last axis is the state dimension.

Policy actions live in normalized units: they are clipped to [-1, 1] and then
multiplied by ``control_bound`` before entering the integrator.
"""
from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

log = logging.getLogger(__name__)

BLOWUP_NORM = 1e6


class DomainError(ValueError):
    """Non-finite input passed to a drift function."""


class IntegrationError(RuntimeError):
    """The integrated state left the admissible region."""


@dataclass(frozen=True)
class LorenzParams:
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    dt: float = 0.01
    control_dim: int = 1
    control_bound: float = 20.0
    kappa: float = 0.01

    def __post_init__(self):
        if min(self.sigma, self.rho, self.beta, self.dt) <= 0:
            raise ValueError("sigma, rho, beta and dt must be positive")
        if self.control_bound <= 0 or self.kappa < 0:
            raise ValueError("control_bound must be > 0 and kappa >= 0")
        if self.control_dim != 1:
            raise ValueError("Lorenz control is scalar")


@dataclass(frozen=True)
class KSParams:
    L: float = 22.0
    N: int = 64
    dt: float = 0.05
    n_actuators: int = 4
    actuator_width: float = 0.8
    control_bound: float = 0.5
    kappa: float = 0.01

    def __post_init__(self):
        if self.L <= 0 or self.dt <= 0:
            raise ValueError("L and dt must be positive")
        if self.N < 16 or self.N & (self.N - 1):
            raise ValueError("N must be a power of two >= 16")
        if self.n_actuators < 1:
            raise ValueError("need at least one actuator")


@dataclass
class NoiseSpec:
    sigma_y: float = 0.0
    sigma_e: float = 0.0
    seed_stream: int = 0

    def __post_init__(self):
        if self.sigma_y < 0 or self.sigma_e < 0:
            raise ValueError("noise standard deviations must be >= 0")


@dataclass
class EnvState:
    x: np.ndarray
    h: int = 0
    truncated: bool = False


@dataclass
class Equilibrium:
    x_star: np.ndarray
    residual_norm: float
    label: str


# ---------------------------------------------------------------- Lorenz


def lorenz_drift(x, u, p: LorenzParams = LorenzParams()):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise DomainError("non-finite Lorenz state or control")
    if u.ndim and u.shape[-1] == 1:
        u = u[..., 0]
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    return np.stack(
        [
            p.sigma * (x2 - x1),
            x1 * (p.rho - x3) - x2 + u,
            x1 * x2 - p.beta * x3,
        ],
        axis=-1,
    )


def _lorenz_rhs(x, u, p):
    # unchecked variant used inside the integrator
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    return np.stack(
        [p.sigma * (x2 - x1), x1 * (p.rho - x3) - x2 + u, x1 * x2 - p.beta * x3],
        axis=-1,
    )


def lorenz_rk4(x, u, p: LorenzParams):
    """One RK4 step with the control held constant over ``dt``."""
    u = np.asarray(u, dtype=float)
    if u.ndim and u.shape[-1] == 1:
        u = u[..., 0]
    dt = p.dt
    k1 = _lorenz_rhs(x, u, p)
    k2 = _lorenz_rhs(x + 0.5 * dt * k1, u, p)
    k3 = _lorenz_rhs(x + 0.5 * dt * k2, u, p)
    k4 = _lorenz_rhs(x + dt * k3, u, p)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def lorenz_equilibria(p: LorenzParams = LorenzParams()):
    r = np.sqrt(p.beta * (p.rho - 1.0))
    return [
        ("origin", np.zeros(3)),
        ("P+", np.array([r, r, p.rho - 1.0])),
        ("P-", np.array([-r, -r, p.rho - 1.0])),
    ]


# ---------------------------------------------------------------- KS


class KSSolver:
    """Pseudo-spectral KS operators and an ETDRK4 stepper (Kassam & Trefethen)."""

    def __init__(self, p: KSParams, n_contour: int = 64):
        self.p = p
        N, L = p.N, p.L
        self.grid = L * np.arange(N) / N
        self.dx = L / N
        k = 2 * np.pi / L * np.arange(N // 2 + 1)
        self.q = k
        self.lin = k**2 - k**4
        kd = k.copy()
        kd[-1] = 0.0  # Nyquist mode carries no odd derivative
        self.ik = 1j * kd
        self.mask = np.arange(N // 2 + 1) <= N // 3
        self.g = -0.5 * self.ik * self.mask

        centers = (np.arange(p.n_actuators) + 0.5) * L / p.n_actuators
        d = self.grid[None, :] - centers[:, None]
        d = (d + L / 2) % L - L / 2  # periodic distance
        w = p.actuator_width
        prof = np.exp(-0.5 * (d / w) ** 2)
        self.actuators = prof / (prof.sum(axis=1, keepdims=True) * self.dx)
        self.actuators_hat = np.fft.rfft(self.actuators, axis=-1)

        dt = p.dt
        Lh = dt * self.lin
        self.E = np.exp(Lh)
        self.E2 = np.exp(Lh / 2)
        r = np.exp(1j * np.pi * (np.arange(1, n_contour + 1) - 0.5) / n_contour)
        LR = Lh[:, None] + r[None, :]
        eLR = np.exp(LR)
        self.Q = dt * np.real(np.mean((np.exp(LR / 2) - 1) / LR, axis=1))
        self.f1 = dt * np.real(np.mean((-4 - LR + eLR * (4 - 3 * LR + LR**2)) / LR**3, axis=1))
        self.f2 = dt * np.real(np.mean((2 + LR + eLR * (-2 + LR)) / LR**3, axis=1))
        self.f3 = dt * np.real(np.mean((-4 - 3 * LR - LR**2 + eLR * (4 - LR)) / LR**3, axis=1))

    def forcing_hat(self, u):
        u = np.asarray(u, dtype=float)
        return u @ self.actuators_hat

    def forcing(self, u):
        return np.asarray(u, dtype=float) @ self.actuators

    def _nonlin_hat(self, v, fhat):
        x = np.fft.irfft(v, n=self.p.N, axis=-1)
        return self.g * np.fft.rfft(x * x, axis=-1) + fhat

    def drift(self, x, u):
        v = np.fft.rfft(x, axis=-1)
        return np.fft.irfft(self.lin * v + self._nonlin_hat(v, self.forcing_hat(u)), n=self.p.N, axis=-1)

    def step(self, x, u):
        fhat = self.forcing_hat(u)
        v = np.fft.rfft(x, axis=-1)
        Nv = self._nonlin_hat(v, fhat)
        a = self.E2 * v + self.Q * Nv
        Na = self._nonlin_hat(a, fhat)
        b = self.E2 * v + self.Q * Na
        Nb = self._nonlin_hat(b, fhat)
        c = self.E2 * a + self.Q * (2 * Nb - Nv)
        Nc = self._nonlin_hat(c, fhat)
        v = self.E * v + Nv * self.f1 + 2 * (Na + Nb) * self.f2 + Nc * self.f3
        return np.fft.irfft(v, n=self.p.N, axis=-1)

    def jacobian(self, x):
        """Dense Jacobian of the uncontrolled drift at ``x``."""
        N = self.p.N
        V = np.eye(N)
        vh = np.fft.rfft(V, axis=-1)
        prod = np.fft.rfft(x[None, :] * V, axis=-1)
        # d/dx [g * fft(x^2)] . v = 2 g fft(x v)
        cols = np.fft.irfft(self.lin * vh + 2 * self.g * prod, n=N, axis=-1)
        return cols.T


@functools.lru_cache(maxsize=8)
def _ks_solver(p: KSParams) -> KSSolver:
    return KSSolver(p)


def ks_drift(x, u, p: KSParams = KSParams()):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise IntegrationError("non-finite KS state or control")
    if np.max(np.abs(x), initial=0.0) > BLOWUP_NORM:
        raise IntegrationError("KS state blew up")
    return _ks_solver(p).drift(x, u)


def ks_newton(solver: KSSolver, x0, tol=1e-10, max_iter=200):
    """Damped Newton on the steady KS equation; returns (x, residual) or None."""
    x = np.array(x0, dtype=float)
    zero = np.zeros(solver.p.n_actuators)
    r = solver.drift(x, zero)
    res = np.linalg.norm(r)
    for _ in range(max_iter):
        if res < tol:
            return x, res
        J = solver.jacobian(x)
        dx = np.linalg.lstsq(J, -r, rcond=1e-10)[0]
        dx -= dx.mean()  # constant states are trivial (Galilean) equilibria
        step = 1.0
        while step > 1e-4:
            xn = x + step * dx
            rn = solver.drift(xn, zero)
            resn = np.linalg.norm(rn)
            if np.isfinite(resn) and resn < res:
                break
            step *= 0.5
        else:
            return None
        x, r, res = xn, rn, resn
    return (x, res) if res < tol else None


def _canonical_shift(solver: KSSolver, x):
    """Translate x so its dominant Fourier mode is a pure cosine."""
    v = np.fft.rfft(x)
    k = int(np.argmax(np.abs(v[1:]))) + 1
    phase = np.angle(v[k])
    shift = phase / k  # in units of 2*pi/L * grid
    modes = np.arange(v.size)
    return np.fft.irfft(v * np.exp(-1j * modes * shift), n=x.size), k


KS_SEEDS = [
    # (wavenumber, amplitude, shift fraction of L); translated low-mode seeds
    (k, a, s)
    for k in (1, 2, 3)
    for a in (0.5, 1.0, 2.0)
    for s in (0.0, 0.25)
]


@functools.lru_cache(maxsize=8)
def ks_equilibria(p: KSParams = KSParams()):
    solver = _ks_solver(p)
    found = []
    zero = np.zeros(p.n_actuators)
    for k, amp, s in KS_SEEDS:
        xx = 2 * np.pi * (solver.grid / p.L - s)
        seed = amp * (np.cos(k * xx) + 0.25 * np.sin((k + 1) * xx))
        out = ks_newton(solver, seed)
        if out is None:
            log.warning("KS Newton did not converge from seed k=%d amp=%g shift=%g", k, amp, s)
            continue
        x, _ = out
        if np.linalg.norm(x - x.mean()) < 1e-3 * np.sqrt(p.N):
            continue
        spec = np.abs(np.fft.rfft(x))
        if any(np.allclose(spec, s2, atol=1e-6 * max(1.0, spec.max())) for s2, *_ in found):
            continue
        xc, kdom = _canonical_shift(solver, x)
        found.append((spec, kdom, xc))
    found.sort(key=lambda t: (t[1], np.linalg.norm(t[2])))
    return tuple((f"E{i + 1}", xc) for i, (_, _, xc) in enumerate(found))


# ---------------------------------------------------------------- environment


ENV_DEFAULTS = {
    "lorenz": dict(horizon=400, sigma_e=1.0, equilibrium_label="P+", state_scale=10.0),
    "ks": dict(horizon=250, sigma_e=0.1, equilibrium_label="E1", state_scale=1.0),
}


@dataclass
class EnvConfig:
    """Run-config ``env`` block plus ``cost.kappa``."""

    name: str = "lorenz"
    dt: Optional[float] = None
    horizon: Optional[int] = None
    sigma_y: float = 0.0
    sigma_e: Optional[float] = None
    equilibrium_label: Optional[str] = None
    init_label: Optional[str] = None
    kappa: float = 0.01
    gamma: float = 0.99
    blowup_cost: float = 1e3

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        env = dict(d.get("env", d))
        noise = env.pop("noise", {}) or {}
        kw = {k: v for k, v in env.items() if k in cls.__dataclass_fields__}
        if "sigma_y" in noise:
            kw["sigma_y"] = noise["sigma_y"]
        if "sigma_e" in noise:
            kw["sigma_e"] = noise["sigma_e"]
        if "cost" in d and "kappa" in d["cost"]:
            kw["kappa"] = d["cost"]["kappa"]
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "env": {
                "name": self.name,
                "dt": self.dt,
                "horizon": self.horizon,
                "noise": {"sigma_y": self.sigma_y, "sigma_e": self.sigma_e},
                "equilibrium_label": self.equilibrium_label,
                "init_label": self.init_label,
                "gamma": self.gamma,
                "blowup_cost": self.blowup_cost,
            },
            "cost": {"kappa": self.kappa},
        }


class Env:
    """One controlled system with its cost, target and noise channel.

    Episodes consist of the decisions h = 0..H; ``step`` returns the cost of
    the transition it performs, measured on the next state.
    """

    def __init__(self, cfg: EnvConfig = EnvConfig(), observation_fn: Callable | None = None):
        if cfg.name not in ENV_DEFAULTS:
            raise ValueError(f"unknown environment {cfg.name!r}")
        self.cfg = cfg
        self.name = cfg.name
        defaults = ENV_DEFAULTS[cfg.name]
        self.horizon = int(cfg.horizon if cfg.horizon is not None else defaults["horizon"])
        self.gamma = float(cfg.gamma)
        self.state_scale = defaults["state_scale"]
        self.blowup_cost = float(cfg.blowup_cost)
        sigma_e = defaults["sigma_e"] if cfg.sigma_e is None else cfg.sigma_e
        self.noise = NoiseSpec(sigma_y=cfg.sigma_y, sigma_e=sigma_e)
        if cfg.name == "lorenz":
            kw = {"kappa": cfg.kappa}
            if cfg.dt is not None:
                kw["dt"] = cfg.dt
            self.params = LorenzParams(**kw)
            self.obs_dim, self.act_dim = 3, 1
        else:
            kw = {"kappa": cfg.kappa}
            if cfg.dt is not None:
                kw["dt"] = cfg.dt
            self.params = KSParams(**kw)
            self.solver = _ks_solver(self.params)
            self.obs_dim, self.act_dim = self.params.N, self.params.n_actuators
        self.dim = self.obs_dim
        self.observation_fn = observation_fn
        self.equilibria = {e.label: e for e in find_equilibria(self)}
        target = cfg.equilibrium_label or defaults["equilibrium_label"]
        if target not in self.equilibria:
            raise ValueError(f"unknown equilibrium {target!r}; have {sorted(self.equilibria)}")
        self.target = self.equilibria[target]
        init = cfg.init_label or target
        if init not in self.equilibria:
            raise ValueError(f"unknown equilibrium {init!r}; have {sorted(self.equilibria)}")
        self.x_ref = self.equilibria[init].x_star

    def control(self, a):
        a = np.clip(np.asarray(a, dtype=float), -1.0, 1.0)
        return a, self.params.control_bound * a

    def advance(self, x, a):
        """Integrate one dt from ``x`` under normalized action ``a`` (clipped here)."""
        _, u = self.control(a)
        if self.name == "lorenz":
            return lorenz_rk4(x, u, self.params)
        return self.solver.step(x, u)

    def cost(self, x_next, a):
        a, _ = self.control(a)
        d = x_next - self.target.x_star
        return np.sum(d * d, axis=-1) / self.dim + self.params.kappa * np.sum(a * a, axis=-1)

    def blown_up(self, x):
        return ~np.all(np.isfinite(x), axis=-1) | (np.max(np.abs(np.nan_to_num(x, nan=np.inf)), axis=-1) > BLOWUP_NORM)

    def observe(self, x, rng, sigma_y=None):
        s = self.noise.sigma_y if sigma_y is None else sigma_y
        return observe(x, NoiseSpec(sigma_y=s), rng, self.observation_fn)

    def reset(self, rng) -> EnvState:
        return EnvState(sample_initial_state(self.x_ref, self.noise.sigma_e, rng), 0)

    def step(self, s: EnvState, a, rng):
        return step(s, a, self, rng)


def observe(x, n: NoiseSpec, rng, observation_fn=None):
    """Return G(x) + eps with eps ~ N(0, sigma_y^2 I); G defaults to identity."""
    y = np.asarray(x, dtype=float)
    if observation_fn is not None:
        y = observation_fn(y)
    if n.sigma_y == 0:
        return y.copy()
    return y + n.sigma_y * rng.standard_normal(y.shape)


def sample_initial_state(x_star, sigma_e, rng):
    x_star = np.asarray(x_star, dtype=float)
    if sigma_e < 0:
        raise ValueError("sigma_e must be >= 0")
    if sigma_e == 0:
        return x_star.copy()
    return x_star + sigma_e * rng.standard_normal(x_star.shape)


def step(s: EnvState, a, env: Env, rng):
    """Advance one step; returns (next state, cost, observation of next state)."""
    if s.h > env.horizon:
        raise ValueError("episode already finished")
    if s.truncated:
        return EnvState(s.x, s.h + 1, True), env.blowup_cost, s.x.copy()
    a = np.asarray(a, dtype=float)
    with np.errstate(all="ignore"):
        x_next = env.advance(s.x, a)
    if env.blown_up(x_next):
        log.warning("%s blow-up at step %d; recording sentinel cost", env.name, s.h)
        return EnvState(s.x, s.h + 1, True), env.blowup_cost, s.x.copy()
    c = float(env.cost(x_next, a))
    return EnvState(x_next, s.h + 1), c, env.observe(x_next, rng)


def find_equilibria(env: Env):
    zero_u = np.zeros(env.act_dim)
    out = []
    if env.name == "lorenz":
        cands = lorenz_equilibria(env.params)
        for label, x in cands:
            x = _refine_lorenz(x, env.params)
            res = float(np.linalg.norm(lorenz_rk4(x, 0.0, env.params) - x))
            out.append(Equilibrium(x, res, label))
    else:
        for label, x in ks_equilibria(env.params):
            res = float(np.linalg.norm(env.solver.step(x, zero_u) - x))
            out.append(Equilibrium(x, res, label))
    return out


def _refine_lorenz(x, p, iters=3):
    for _ in range(iters):
        f = _lorenz_rhs(x, 0.0, p)
        x1, x2, x3 = x
        J = np.array([[-p.sigma, p.sigma, 0.0], [p.rho - x3, -1.0, -x1], [x2, x1, -p.beta]])
        x = x - np.linalg.solve(J, f)
    return x


def rollout_cost(env, policy, x0, H, gamma, noise: NoiseSpec | None, rng):
    """Discounted cost sum_{h=0}^{H} gamma^h c_h of one sampled trajectory.

    ``policy`` maps (observation, rng) to an action.  ``env`` only needs
    ``advance(x, a)`` and ``cost(x_next, a)``; a ``blown_up`` method enables
    the sentinel-cost path.
    """
    if H < 1 or not (0 < gamma <= 1):
        raise ValueError("need H >= 1 and 0 < gamma <= 1")
    noise = noise or NoiseSpec()
    blown_up = getattr(env, "blown_up", None)
    sentinel = getattr(env, "blowup_cost", 1e3)
    x = np.asarray(x0, dtype=float)
    total, disc, dead = 0.0, 1.0, False
    for _ in range(H + 1):
        if dead:
            c = sentinel
        else:
            a = policy(observe(x, noise, rng), rng)
            with np.errstate(all="ignore"):
                x_next = env.advance(x, a)
            if blown_up is not None and blown_up(x_next):
                dead, c = True, sentinel
            else:
                c = float(env.cost(x_next, a))
                x = x_next
        total += disc * c
        disc *= gamma
    return total

"""Temperature x seed sweeps, per-run artifacts and report tables.

Layout of a sweep root::

    index.json                      manifest index
    runs/<run_id>/manifest.json     RunManifest
    runs/<run_id>/config.json       resolved TrainConfig
    runs/<run_id>/checkpoint.json   policy (+ value) parameters
    runs/<run_id>/trainlog.csv      per-update TrainLog
    runs/<run_id>/train_summary.json
    runs/<run_id>/eval/<eq>__sy<sigma>.json / .csv
    runs/<run_id>/states.json       visitation states used for measures
    runs/<run_id>/complexity.json / .csv
    reports/*.csv, reports/*.json
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import complexity, robustness
from .dynamics import ENV_DEFAULTS, Env, EnvConfig
from .policy import load_checkpoint, save_checkpoint
from .ppo import TrainConfig, TrainLog, make_env, train
from .robustness import boxplot_stats

log = logging.getLogger(__name__)

DESK_BUDGET = {"lorenz": 100_000, "ks": 200_000}
PAPER_BUDGET = {"lorenz": 1_000_000, "ks": 2_000_000}
MIN_MODELS = 8


class ConfigError(ValueError):
    pass


class MissingArtifactsError(RuntimeError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing artifacts:\n  " + "\n  ".join(map(str, self.missing)))


@dataclass
class SweepConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    alpha_grid: tuple = (0.0, 1e-3, 4e-3, 1.6e-2, 6.4e-2)
    n_seeds: int = 3
    seed: int = 0
    m_total: Optional[int] = None
    train: dict = field(default_factory=dict)
    sigma_y_rel: tuple = (0.05, 0.1, 0.2)
    equilibria: Optional[tuple] = None
    eval_episodes: int = 1024
    n_x0: int = 256
    episodes_per_x0: int = 4
    mean_action: bool = False
    n_states: int = 4096
    parallelism: int = 1
    paper_scale: bool = False

    def __post_init__(self):
        if isinstance(self.env, dict):
            self.env = EnvConfig.from_dict(self.env)
        self.alpha_grid = tuple(float(a) for a in self.alpha_grid)
        self.sigma_y_rel = tuple(float(s) for s in self.sigma_y_rel)
        if self.equilibria is not None:
            self.equilibria = tuple(self.equilibria)
        if 0.0 not in self.alpha_grid:
            raise ConfigError("alpha_grid must contain 0 (the control experiment)")
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1")
        if self.env.name not in ENV_DEFAULTS:
            raise ConfigError(f"unknown environment {self.env.name!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        sweep = dict(d.get("sweep", {}))
        kw = {k: v for k, v in sweep.items() if k in cls.__dataclass_fields__}
        if "train" in d:
            kw["train"] = dict(d["train"])
        if "seed" in d and "seed" not in kw:
            kw["seed"] = d["seed"]
        try:
            return cls(env=EnvConfig.from_dict(d) if "env" in d else EnvConfig(), **kw)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @property
    def budget(self) -> int:
        if self.m_total is not None:
            return int(self.m_total)
        return (PAPER_BUDGET if self.paper_scale else DESK_BUDGET)[self.env.name]

    @property
    def seeds(self):
        n = 10 if self.paper_scale else self.n_seeds
        return [self.seed + i for i in range(n)]

    def sigma_grid(self):
        scale = ENV_DEFAULTS[self.env.name]["state_scale"]
        return [r * scale for r in self.sigma_y_rel]

    def equilibrium_list(self):
        return list(self.equilibria or [self.env.equilibrium_label or ENV_DEFAULTS[self.env.name]["equilibrium_label"]])

    def train_config(self, alpha0, seed) -> TrainConfig:
        kw = {k: v for k, v in self.train.items() if k in TrainConfig.__dataclass_fields__}
        kw.update(env=self.env, seed=seed, alpha0=alpha0, m_total=self.budget)
        return TrainConfig(**kw)


@dataclass
class RunManifest:
    run_id: str
    env: str
    seed: int
    alpha0: float
    schedule: dict
    budgets: dict
    config_hash: str
    started: str = ""
    finished: str = ""
    status: str = "pending"
    error: str = ""
    artifacts: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def run_id_for(env, alpha0, seed) -> str:
    return f"{env}-a{alpha0:g}-s{seed}"


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)


def _read_json(path):
    with open(path) as f:
        return json.load(f)


def _eval_name(eq, sigma):
    return f"{eq}__sy{sigma:g}"


def _eval_seed(seed):
    return int(np.random.SeedSequence([seed, 0xE7A1]).generate_state(1, np.uint32)[0])


def _run_spec(cfg: SweepConfig, alpha0, seed) -> dict:
    tc = cfg.train_config(alpha0, seed)
    return {
        "train": tc.to_dict(),
        "eval": {
            "sigma_y": cfg.sigma_grid(),
            "equilibria": cfg.equilibrium_list(),
            "episodes": cfg.eval_episodes,
            "n_x0": cfg.n_x0,
            "episodes_per_x0": cfg.episodes_per_x0,
            "mean_action": cfg.mean_action,
        },
        "measure": {"n_states": cfg.n_states},
    }


def evaluate_run(run_dir, policy, env_cfg: EnvConfig, gamma, sigma_y, equilibrium, episodes,
                 seed, n_x0=256, episodes_per_x0=4, crn=True, mean_action=False):
    """Write the ExcessRiskReport JSON and conditional-sample CSV for one (sigma_y, x0 reference)."""
    env = Env(EnvConfig(**{**asdict(env_cfg), "sigma_y": 0.0, "init_label": equilibrium, "gamma": gamma}))
    base = _eval_seed(seed)
    rng = np.random.default_rng(base)
    rep = robustness.excess_risk(policy, env, sigma_y, episodes, rng, crn_base_seed=base,
                                 mean_action=mean_action, label=equilibrium, crn=crn)
    cond = robustness.conditional_excess_risk(policy, env, sigma_y, rng, n_x0=n_x0,
                                              episodes_per_x0=episodes_per_x0,
                                              crn_base_seed=base + 1, mean_action=mean_action)
    rep.conditional_samples = cond.rate.tolist()
    name = _eval_name(equilibrium, sigma_y)
    out = Path(run_dir) / "eval"
    _write_json(out / f"{name}.json", rep.to_dict())
    (out / f"{name}.csv").write_text(robustness.conditional_csv(cond, sigma_y))
    return rep


def measure_run(run_dir, policy, env: Env, n_states, seed):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5747]))
    sample = complexity.sample_visitation(policy, env, n_states, rng)
    _write_json(Path(run_dir) / "states.json", sample.states.tolist())
    rep = complexity.measure(policy, sample.states)
    _write_json(Path(run_dir) / "complexity.json", rep.to_dict())
    (Path(run_dir) / "complexity.csv").write_text(rep.to_csv())
    return rep


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S")


def _manifest_complete(run_dir: Path, h: str) -> bool:
    mpath = run_dir / "manifest.json"
    if not mpath.exists():
        return False
    m = RunManifest.from_dict(_read_json(mpath))
    return (m.status == "complete" and m.config_hash == h
            and all((run_dir / p).exists() for p in m.artifacts.values()))


def execute_run(root, cfg: SweepConfig, alpha0, seed) -> RunManifest:
    """Train, evaluate and measure one (alpha0, seed) pair; skipped when already complete."""
    spec = _run_spec(cfg, alpha0, seed)
    h = config_hash(spec)
    rid = run_id_for(cfg.env.name, alpha0, seed)
    run_dir = Path(root) / "runs" / rid
    if _manifest_complete(run_dir, h):
        log.info("skip %s (complete)", rid)
        return RunManifest.from_dict(_read_json(run_dir / "manifest.json"))
    run_dir.mkdir(parents=True, exist_ok=True)
    tc = cfg.train_config(alpha0, seed)
    man = RunManifest(
        run_id=rid, env=cfg.env.name, seed=seed, alpha0=alpha0,
        schedule={"alpha0": alpha0, "m_quarter": tc.m_total // 4, "m_total": tc.m_total},
        budgets={"m_total": tc.m_total, "eval_episodes": cfg.eval_episodes, "n_states": cfg.n_states},
        config_hash=h, started=_now(),
    )
    try:
        _write_json(run_dir / "config.json", spec)
        policy, value, tlog = train(tc)
        env = make_env(tc)
        final = robustness.estimate_loss(policy, env, 0.0, tc.baseline_episodes,
                                         None, crn_base_seed=tc.seed)
        save_checkpoint(run_dir / "checkpoint.json", policy, value)
        (run_dir / "trainlog.csv").write_text(tlog.to_csv())
        _write_json(run_dir / "train_summary.json", {
            "baseline_cost": tlog.baseline_cost, "baseline_stderr": tlog.baseline_stderr,
            "final_cost": final.mean, "final_stderr": final.stderr,
            "n_updates": len(tlog.records),
        })
        arts = {"config": "config.json", "checkpoint": "checkpoint.json",
                "trainlog": "trainlog.csv", "train_summary": "train_summary.json"}
        for eq in cfg.equilibrium_list():
            for s in cfg.sigma_grid():
                evaluate_run(run_dir, policy, tc.env, tc.gamma, s, eq, cfg.eval_episodes, seed,
                             cfg.n_x0, cfg.episodes_per_x0, mean_action=cfg.mean_action)
                name = _eval_name(eq, s)
                arts[f"eval:{name}"] = f"eval/{name}.json"
                arts[f"cond:{name}"] = f"eval/{name}.csv"
        measure_run(run_dir, policy, env, cfg.n_states, seed)
        arts.update(states="states.json", complexity="complexity.json", complexity_csv="complexity.csv")
        man.artifacts = arts
        man.status = "complete"
    except Exception as e:  # recorded; the sweep carries on
        log.error("run %s failed: %s", rid, e)
        man.status = "failed"
        man.error = "".join(traceback.format_exception_only(type(e), e)).strip()
    man.finished = _now()
    _write_json(run_dir / "manifest.json", man.to_dict())
    return man


def _execute(args):
    return execute_run(*args)


def run_sweep(cfg: SweepConfig, root) -> list:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    jobs = [(str(root), cfg, a, s) for a in cfg.alpha_grid for s in cfg.seeds]
    if cfg.parallelism > 1:
        with ProcessPoolExecutor(max_workers=cfg.parallelism) as ex:
            manifests = list(ex.map(_execute, jobs))
    else:
        manifests = [_execute(j) for j in jobs]
    _write_json(root / "index.json", {
        "env": cfg.env.name,
        "runs": [{"run_id": m.run_id, "manifest": f"runs/{m.run_id}/manifest.json",
                  "config_hash": m.config_hash, "status": m.status} for m in manifests],
    })
    return manifests


def load_manifests(root) -> list:
    root = Path(root)
    idx = _read_json(root / "index.json")
    out = []
    for r in idx["runs"]:
        m = RunManifest.from_dict(_read_json(root / r["manifest"]))
        cfg_path = root / "runs" / m.run_id / "config.json"
        if m.config_hash != r["config_hash"] or (
                cfg_path.exists() and config_hash(_read_json(cfg_path)) != m.config_hash):
            raise MissingArtifactsError([f"{m.run_id}: manifest hash mismatch"])
        out.append(m)
    return out


# ---------------------------------------------------------------- reports


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _require(root, manifests, kinds):
    missing = []
    for m in manifests:
        if m.status != "complete":
            missing.append(f"{m.run_id}: run status {m.status}")
            continue
        for key, rel in m.artifacts.items():
            if any(key == k or key.startswith(k + ":") for k in kinds):
                p = Path(root) / "runs" / m.run_id / rel
                if not p.exists():
                    missing.append(p)
    if missing:
        raise MissingArtifactsError(missing)


def _eval_entries(root, m):
    for key, rel in sorted(m.artifacts.items()):
        if key.startswith("eval:"):
            rep = _read_json(Path(root) / "runs" / m.run_id / rel)
            yield key[5:], rep


def report_fig1(root, manifests) -> str:
    _require(root, manifests, ["eval", "cond"])
    rows = []
    for m in manifests:
        for name, rep in _eval_entries(root, m):
            cond = robustness.read_conditional_csv(
                (Path(root) / "runs" / m.run_id / m.artifacts[f"cond:{name}"]).read_text())
            b = boxplot_stats(cond)
            rows.append((m.env, rep["equilibrium_label"], m.alpha0, rep["sigma_y"], m.seed,
                         b.q1, b.median, b.q3, b.whisker_lo, b.whisker_hi, len(b.outliers)))
    rows.sort(key=lambda r: r[:5])
    return _csv(["env", "equilibrium", "alpha", "sigma_y", "seed", "q1", "median", "q3",
                 "whisker_lo", "whisker_hi", "n_outliers"], rows)


def _complexity(root, m):
    return complexity.ComplexityReport.from_dict(
        _read_json(Path(root) / "runs" / m.run_id / m.artifacts["complexity"]))


def report_fig2(root, manifests) -> str:
    _require(root, manifests, ["complexity"])
    rows = []
    for m in manifests:
        rep = _complexity(root, m)
        for p in complexity.OPERATOR_PS:
            rows.append((m.env, m.alpha0, m.seed, p, rep.layer_products[p],
                         rep.vector_norms.get(p, "")))
    rows.sort(key=lambda r: (r[0], r[1], r[2], complexity.OPERATOR_PS.index(r[3])))
    return _csv(["env", "alpha", "seed", "p", "layer_product", "vector_norm"], rows)


def report_fig3(root, manifests):
    """Returns (summary CSV text, KDE JSON object)."""
    _require(root, manifests, ["complexity"])
    rows, kdes = [], []
    for m in sorted(manifests, key=lambda m: (m.env, m.alpha0, m.seed)):
        rep = _complexity(root, m)
        samples = np.asarray(rep.fim_trace_samples)
        skew, kurt = complexity.skewness_kurtosis(samples)
        rows.append((m.env, m.alpha0, m.seed, float(samples.mean()), float(np.median(samples)),
                     skew, kurt))
        kdes.append({"env": m.env, "alpha": m.alpha0, "seed": m.seed, "bandwidth": rep.kde_bandwidth,
                     "grid": rep.kde_grid, "density": rep.kde_density})
    return _csv(["env", "alpha", "seed", "mean", "median", "skewness", "excess_kurtosis"], rows), kdes


def report_appendix_kl(root, manifests) -> str:
    _require(root, manifests, ["trainlog"])
    rows = []
    for m in sorted(manifests, key=lambda m: (m.env, m.alpha0, m.seed)):
        tl = TrainLog.from_csv((Path(root) / "runs" / m.run_id / m.artifacts["trainlog"]).read_text())
        for r in tl.records:
            rows.append((m.env, m.alpha0, m.seed, r["update"], r["env_steps"], r["dbar_kl"]))
    return _csv(["env", "alpha", "seed", "update_index", "env_steps", "dbar_kl"], rows)


# ---------------------------------------------------------------- correlation


def _ranks(x):
    """Average ranks (1-based), ties share the mean rank."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    rx, ry = _ranks(x), _ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    den = np.sqrt(np.sum(rx * rx) * np.sum(ry * ry))
    return float(np.sum(rx * ry) / den) if den > 0 else float("nan")


def bootstrap_interval(x, y, n_boot=1000, level=0.9, seed=0):
    x, y = np.asarray(x, float), np.asarray(y, float)
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(n_boot):
        idx = rng.integers(0, len(x), len(x))
        r = spearman(x[idx], y[idx])
        if np.isfinite(r):
            vals.append(r)
    if not vals:
        return float("nan"), float("nan")
    lo, hi = np.percentile(vals, [50 * (1 - level), 50 * (1 + level)])
    return float(lo), float(hi)


@dataclass
class CorrelationEntry:
    measure: str
    metric: str
    rho: float
    n: int
    lo: float
    hi: float

    @property
    def verdict(self) -> str:
        if not np.isfinite(self.rho):
            return "undefined"
        if self.lo <= 0 <= self.hi:
            return "inconclusive"
        return "negative" if self.rho < 0 else "positive"


@dataclass
class CorrelationSummary:
    entries: list

    def get(self, measure, metric) -> CorrelationEntry:
        for e in self.entries:
            if e.measure == measure and e.metric == metric:
                return e
        raise KeyError((measure, metric))

    def to_csv(self) -> str:
        return _csv(["measure", "metric", "spearman", "n", "ci90_lo", "ci90_hi", "verdict"],
                    [(e.measure, e.metric, e.rho, e.n, e.lo, e.hi, e.verdict) for e in self.entries])

    def to_dict(self):
        return {"entries": [asdict(e) | {"verdict": e.verdict} for e in self.entries]}


def model_table(root, manifests):
    """Per-model measures and robustness metrics (mean R_rate per sigma_y at each x0 reference)."""
    _require(root, manifests, ["complexity", "eval"])
    table = []
    for m in sorted(manifests, key=lambda m: (m.env, m.alpha0, m.seed)):
        rep = _complexity(root, m)
        row = {"alpha0": m.alpha0, "fim_trace_mean": rep.fim_trace_mean}
        row.update({f"vector_norm_p{p}": v for p, v in rep.vector_norms.items()})
        row.update({f"layer_product_p{p}": v for p, v in rep.layer_products.items()})
        metrics = {}
        for name, er in _eval_entries(root, m):
            metrics[f"R_rate@{er['equilibrium_label']}@sy{er['sigma_y']:g}"] = er["R_rate"]
        table.append((row, metrics))
    return table


def correlate_arrays(measures: dict, metrics: dict, n_boot=1000, seed=0) -> CorrelationSummary:
    """Spearman correlation of every measure column against every robustness column."""
    n = {len(v) for v in list(measures.values()) + list(metrics.values())}
    if len(n) != 1:
        raise ValueError("measure and metric columns differ in length")
    n = n.pop()
    if n < MIN_MODELS:
        raise ValueError(f"insufficient data for correlation: {n} models < {MIN_MODELS}")
    entries = []
    for metric in metrics:
        y = np.asarray(metrics[metric], float)
        for meas in measures:
            x = np.asarray(measures[meas], float)
            lo, hi = bootstrap_interval(x, y, n_boot, seed=seed)
            entries.append(CorrelationEntry(meas, metric, spearman(x, y), n, lo, hi))
    return CorrelationSummary(entries)


def correlate(root, manifests, n_boot=1000, seed=0) -> CorrelationSummary:
    table = model_table(root, manifests)
    if not table:
        raise ValueError("insufficient data for correlation: no completed runs")
    measures = {k: [t[0][k] for t in table] for k in table[0][0]}
    keys = sorted(table[0][1])
    metrics = {k: [t[1][k] for t in table] for k in keys}
    metrics["R_rate_mean"] = [float(np.mean([t[1][k] for k in keys])) for t in table]
    return correlate_arrays(measures, metrics, n_boot, seed)


def write_reports(root, manifests=None) -> dict:
    root = Path(root)
    manifests = manifests if manifests is not None else load_manifests(root)
    done = [m for m in manifests if m.status == "complete"]
    out = root / "reports"
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    (out / "fig1.csv").write_text(report_fig1(root, done))
    (out / "fig2.csv").write_text(report_fig2(root, done))
    summary, kdes = report_fig3(root, done)
    (out / "fig3_summary.csv").write_text(summary)
    _write_json(out / "fig3_kde.json", kdes)
    (out / "appendix_kl.csv").write_text(report_appendix_kl(root, done))
    paths.update({k: str(out / f"{k}.csv") for k in ("fig1", "fig2", "fig3_summary", "appendix_kl")})
    paths["fig3_kde"] = str(out / "fig3_kde.json")
    try:
        corr = correlate(root, done)
    except ValueError as e:
        log.warning("correlation skipped: %s", e)
    else:
        (out / "correlation.csv").write_text(corr.to_csv())
        _write_json(out / "correlation.json", corr.to_dict())
        paths["correlation"] = str(out / "correlation.csv")
    return paths

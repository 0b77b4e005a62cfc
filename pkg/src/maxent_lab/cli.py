"""Command line entry point: ``maxent-lab {train,evaluate,measure,sweep,report}``.

Exit codes: 0 success, 1 partial failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import complexity, harness
from .dynamics import ENV_DEFAULTS
from .policy import load_checkpoint, save_checkpoint
from .ppo import TrainConfig, make_env, train
from .robustness import estimate_loss

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("maxent_lab")


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise harness.ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(cfg, dict):
        raise harness.ConfigError("config root must be a JSON object")
    return cfg


def _train_config(args, raw) -> TrainConfig:
    tc = TrainConfig.from_dict(raw)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "alpha0", None) is not None:
        over["alpha0"] = args.alpha0
    if getattr(args, "steps", None) is not None:
        over["m_total"] = args.steps
    if over:
        d = tc.to_dict()
        d["train"].update(over)
        tc = TrainConfig.from_dict(d)
    return tc


def cmd_train(args, raw):
    tc = _train_config(args, raw)
    out = Path(args.out or "train_out")
    out.mkdir(parents=True, exist_ok=True)
    policy, value, tlog = train(tc)
    final = estimate_loss(policy, make_env(tc), 0.0, tc.baseline_episodes, None, crn_base_seed=tc.seed)
    harness._write_json(out / "config.json", {"train": tc.to_dict()})
    save_checkpoint(out / "checkpoint.json", policy, value)
    (out / "trainlog.csv").write_text(tlog.to_csv())
    summary = {"baseline_cost": tlog.baseline_cost, "baseline_stderr": tlog.baseline_stderr,
               "final_cost": final.mean, "final_stderr": final.stderr, "n_updates": len(tlog.records)}
    harness._write_json(out / "train_summary.json", summary)
    print(json.dumps(summary))
    return EXIT_OK


def _run_train_config(run_dir: Path) -> TrainConfig:
    path = run_dir / "config.json"
    if not path.exists():
        raise harness.ConfigError(f"{path} not found")
    return TrainConfig.from_dict(harness._read_json(path)["train"])


def cmd_evaluate(args, raw):
    run = Path(args.run)
    tc = _run_train_config(run)
    policy, _ = load_checkpoint(run / "checkpoint.json")
    scale = ENV_DEFAULTS[tc.env.name]["state_scale"]
    sigmas = args.sigma_y or [r * scale for r in (0.05, 0.1, 0.2)]
    eqs = args.equilibrium or [tc.env.equilibrium_label or ENV_DEFAULTS[tc.env.name]["equilibrium_label"]]
    seed = tc.seed if args.seed is None else args.seed
    out = Path(args.out) if args.out else run
    for eq in eqs:
        for s in sigmas:
            rep = harness.evaluate_run(out, policy, tc.env, tc.gamma, s, eq, args.episodes, seed,
                                       args.n_x0, args.episodes_per_x0, crn=args.crn)
            print(f"{eq} sigma_y={s:g}: R={rep.R:.6g} +- {rep.R_stderr:.3g}  "
                  f"R_rate={rep.R_rate:.6g} +- {rep.R_rate_stderr:.3g}")
    return EXIT_OK


def cmd_measure(args, raw):
    policy, _ = load_checkpoint(args.checkpoint)
    if args.states:
        states = np.asarray(harness._read_json(args.states), dtype=float)
    elif args.run:
        tc = _run_train_config(Path(args.run))
        rng = np.random.default_rng(tc.seed if args.seed is None else args.seed)
        states = complexity.sample_visitation(policy, make_env(tc), args.n_states, rng).states
    else:
        raise harness.ConfigError("measure needs --states or --run")
    rep = complexity.measure(policy, states)
    out = Path(args.out or ".")
    harness._write_json(out / "complexity.json", rep.to_dict())
    (out / "complexity.csv").write_text(rep.to_csv())
    print(rep.to_csv(), end="")
    return EXIT_OK


def _sweep_config(args, raw) -> harness.SweepConfig:
    d = json.loads(json.dumps(raw))
    sw = d.setdefault("sweep", {})
    if args.seed is not None:
        sw["seed"] = args.seed
    if args.parallelism is not None:
        sw["parallelism"] = args.parallelism
    if args.paper_scale:
        sw["paper_scale"] = True
    if args.alpha:
        sw["alpha_grid"] = args.alpha
    if args.n_seeds is not None:
        sw["n_seeds"] = args.n_seeds
    if args.steps is not None:
        sw["m_total"] = args.steps
    if args.env is not None:
        d.setdefault("env", {})["name"] = args.env
    return harness.SweepConfig.from_dict(d)


def cmd_sweep(args, raw):
    cfg = _sweep_config(args, raw)
    root = Path(args.out or "sweep_out")
    manifests = harness.run_sweep(cfg, root)
    failed = [m.run_id for m in manifests if m.status != "complete"]
    if len(failed) < len(manifests):
        paths = harness.write_reports(root, manifests)
        for k, p in paths.items():
            print(f"{k}: {p}")
    for rid in failed:
        print(f"FAILED {rid}", file=sys.stderr)
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_report(args, raw):
    root = Path(args.out or "sweep_out")
    manifests = harness.load_manifests(root)
    paths = harness.write_reports(root, manifests)
    for k, p in paths.items():
        print(f"{k}: {p}")
    return EXIT_PARTIAL if any(m.status != "complete" for m in manifests) else EXIT_OK


def _add_globals(p, suppress):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="JSON run/sweep config")
    p.add_argument("--out", default=d, help="output directory")
    p.add_argument("--seed", type=int, default=d)
    p.add_argument("--parallelism", type=int, default=d)
    p.add_argument("-v", "--verbose", action="store_true", default=d if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="maxent-lab")
    _add_globals(ap, suppress=False)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one PPO policy")
    p.add_argument("--alpha0", type=float)
    p.add_argument("--steps", type=int, help="environment-step budget")

    p = sub.add_parser("evaluate", help="excess risk of a trained run")
    p.add_argument("--run", required=True, help="run directory with config.json and checkpoint.json")
    p.add_argument("--sigma-y", type=float, action="append")
    p.add_argument("--equilibrium", action="append")
    p.add_argument("--episodes", type=int, default=1024)
    p.add_argument("--n-x0", type=int, default=256)
    p.add_argument("--episodes-per-x0", type=int, default=4)
    p.add_argument("--crn", action=argparse.BooleanOptionalAction, default=True)

    p = sub.add_parser("measure", help="complexity measures of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--states", help="JSON list of states")
    p.add_argument("--run", help="sample states from this run's environment instead")
    p.add_argument("--n-states", type=int, default=4096)

    p = sub.add_parser("sweep", help="temperature x seed sweep with reports")
    p.add_argument("--paper-scale", action="store_true")
    p.add_argument("--alpha", type=float, action="append")
    p.add_argument("--n-seeds", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--env", choices=sorted(ENV_DEFAULTS))

    sub.add_parser("report", help="rebuild report tables of a sweep root")

    for sp in sub.choices.values():
        _add_globals(sp, suppress=True)
    return ap


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "measure": cmd_measure,
            "sweep": cmd_sweep, "report": cmd_report}


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        raw = _load_config(args.config)
        return COMMANDS[args.command](args, raw)
    except (harness.ConfigError, ValueError, TypeError, KeyError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except harness.MissingArtifactsError as e:
        print(str(e), file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())

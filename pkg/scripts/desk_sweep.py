"""Desk-scale temperature sweep on Lorenz (or KS) and the correlation table.

    python scripts/desk_sweep.py --out runs/desk --alphas 0 4e-3 6.4e-2 --seeds 3
"""
import argparse
import logging

from maxent_lab import harness
from maxent_lab.dynamics import EnvConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--env", default="lorenz", choices=["lorenz", "ks"])
    ap.add_argument("--alphas", type=float, nargs="+", default=[0.0, 1e-3, 4e-3, 1.6e-2, 6.4e-2])
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--steps", type=int, default=None, help="defaults to the desk budget of the env")
    ap.add_argument("--parallelism", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = harness.SweepConfig(env=EnvConfig(args.env), alpha_grid=tuple(args.alphas), n_seeds=args.seeds,
                              m_total=args.steps, parallelism=args.parallelism)
    manifests = harness.run_sweep(cfg, args.out)
    harness.write_reports(args.out, manifests)
    for m in manifests:
        print(f"{m.run_id:28s} {m.status}")
    try:
        corr = harness.correlate(args.out, [m for m in manifests if m.status == "complete"])
    except ValueError as e:
        print(f"no correlation table: {e}")
        return
    for e in corr.entries:
        if e.measure == "alpha0" or e.metric == "R_rate_mean":
            print(f"{e.measure:22s} {e.metric:22s} rho={e.rho:+.3f} [{e.lo:+.3f}, {e.hi:+.3f}] {e.verdict}")


if __name__ == "__main__":
    main()

"""Conditional versus unconditional excess-risk rates for one checkpoint.

The unconditional rate is a ratio of means, so the conditional samples agree
with it after weighting by J_clean(x0); the plain mean of per-x0 rates is a
different quantity whenever J_clean varies across initial states.

    python scripts/rate_estimands.py --checkpoint runs/desk/runs/lorenz-a0-s0/checkpoint.json
"""
import argparse

import numpy as np

from maxent_lab import robustness as R
from maxent_lab.dynamics import Env, EnvConfig
from maxent_lab.policy import init_policy, load_checkpoint


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint", help="omit to use a freshly initialised policy")
    ap.add_argument("--env", default="lorenz", choices=["lorenz", "ks"])
    ap.add_argument("--horizon", type=int, default=None)
    ap.add_argument("--sigma-y", type=float, nargs="+", default=[0.5, 1.0, 2.0])
    args = ap.parse_args()

    env = Env(EnvConfig(args.env, horizon=args.horizon))
    if args.checkpoint:
        pol = load_checkpoint(args.checkpoint)[0]
    else:
        pol = init_policy(env.obs_dim, env.act_dim, np.random.default_rng(0), obs_shift=env.target.x_star,
                          obs_scale=env.state_scale)
    for s in args.sigma_y:
        rep = R.excess_risk(pol, env, s, 1024, None, crn_base_seed=11)
        c = R.conditional_excess_risk(pol, env, s, None, n_x0=256, episodes_per_x0=4, crn_base_seed=12)
        weighted = c.R.sum() / c.J_clean.sum()
        print(f"sigma_y={s:g}: R_rate {rep.R_rate:.4g} +- {rep.R_rate_stderr:.2g} | "
              f"weighted conditional {weighted:.4g} | mean of per-x0 rates {c.rate.mean():.4g} | "
              f"J_clean spread {c.J_clean.min():.3g}..{c.J_clean.max():.3g}")


if __name__ == "__main__":
    main()

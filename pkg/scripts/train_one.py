"""Train one policy and print its learning curve every few updates.

    python scripts/train_one.py --env lorenz --alpha0 4e-3 --steps 100000
"""
import argparse

import numpy as np

from maxent_lab.dynamics import EnvConfig
from maxent_lab.ppo import TrainConfig, make_env, train
from maxent_lab.robustness import estimate_loss


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--env", default="lorenz", choices=["lorenz", "ks"])
    ap.add_argument("--alpha0", type=float, default=0.0)
    ap.add_argument("--steps", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--every", type=int, default=5)
    args = ap.parse_args()

    tc = TrainConfig(env=EnvConfig(args.env), alpha0=args.alpha0, m_total=args.steps, seed=args.seed)
    policy, _, log = train(tc)
    print(f"baseline cost {log.baseline_cost:.4g} +- {log.baseline_stderr:.2g}")
    for i, r in enumerate(log.records):
        if i % args.every == 0 or i == len(log.records) - 1:
            print(f"update {i:4d} steps {r['env_steps']:7d} alpha {r['alpha']:.2e} "
                  f"cost {r['mean_episode_cost']:.4g} kl {r['dbar_kl']:.3e} entropy {r['entropy']:.3f}")
    final = estimate_loss(policy, make_env(tc), 0.0, tc.baseline_episodes, None, crn_base_seed=tc.seed)
    print(f"final cost {final.mean:.4g} +- {final.stderr:.2g} "
          f"({final.mean / log.baseline_cost:.3f} of baseline); std {np.round(policy.std, 4)}")


if __name__ == "__main__":
    main()

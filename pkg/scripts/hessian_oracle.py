"""Score-function objective Hessian against its two oracles at a chosen sample size.

    python scripts/hessian_oracle.py --n 1000000
"""
import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from conftest import linear_policy  # noqa: E402
from toys import Bandit, Lin2, fd_hessian  # noqa: E402

from maxent_lab.complexity import objective_hessian_estimate  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=1_000_000)
    ap.add_argument("--fd-step", type=float, default=1e-2)
    args = ap.parse_args()

    t = time.time()
    h = objective_hessian_estimate(linear_policy([[0.0]], 1.0), Bandit(), args.n, np.random.default_rng(0))
    print(f"bandit: {h.matrix[0, 0]:.5f} +- {h.stderr[0, 0]:.5f} (exact 2)  {time.time() - t:.1f}s")

    t = time.time()
    pol = linear_policy([[0.3, -0.4]], 0.5)
    est = objective_hessian_estimate(pol, Lin2(), args.n, np.random.default_rng(1))
    ref = fd_hessian(pol, Lin2(), args.n, 5, step=args.fd_step)
    print("estimator:\n", np.round(est.matrix, 4), "\nstderr:\n", np.round(est.stderr, 4))
    print("finite differences:\n", np.round(ref, 4))
    print(f"relative error {np.linalg.norm(est.matrix - ref) / np.linalg.norm(ref):.4f}  {time.time() - t:.1f}s")


if __name__ == "__main__":
    main()

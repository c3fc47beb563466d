"""Round-by-round metrics on the nonlinear Gaussian task for SRE and SNPE-C.

    python scripts/nlg_trend.py --seeds 10 --rounds 5 --out runs/nlg
"""
import argparse
from pathlib import Path

import numpy as np

from clfi.harness import ExperimentConfig, read_metrics, run_experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--rounds", type=int, default=5)
    ap.add_argument("--sims", type=int, default=1000)
    ap.add_argument("--algorithms", default="sre,snpec")
    ap.add_argument("--out", default="runs/nlg")
    args = ap.parse_args()

    for algo in args.algorithms.split(","):
        table = []
        for seed in range(args.seeds):
            out = Path(args.out) / algo / f"seed_{seed}"
            cfg = ExperimentConfig(task="nonlinear-gaussian", algorithm=algo, rounds=args.rounds,
                                   sims_per_round=args.sims, seed=seed, output_dir=str(out),
                                   acceptance_proposals=0)
            run_experiment(cfg)
            table.append([(r["neg_log_prob_true"], r["median_distance"]) for r in read_metrics(out / "metrics.csv")])
        arr = np.array(table)  # seeds x rounds x 2
        print(f"{algo}: round, mean -log p(theta*), mean median distance")
        for r in range(arr.shape[1]):
            print(f"  {r + 1}  {arr[:, r, 0].mean():8.3f}  {arr[:, r, 1].mean():8.3f}")
        better = int(np.sum(arr[:, -1, 0] < arr[:, 0, 0]))
        print(f"  final beats first on -log p(theta*) in {better}/{args.seeds} seeds")


if __name__ == "__main__":
    main()

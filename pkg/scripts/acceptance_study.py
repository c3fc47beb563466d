"""Support acceptance rate of the SNPE-C posterior per round.

Tasks with a bounded prior (nonlinear Gaussian, M/G/1) leak mass outside
the support; the conjugate task cannot.

    python scripts/acceptance_study.py --proposals 100000 --out runs/acc
"""
import argparse
from pathlib import Path

from clfi.harness import ExperimentConfig, read_metrics, run_experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--proposals", type=int, default=100_000)
    ap.add_argument("--rounds", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/acceptance")
    args = ap.parse_args()

    for task in ("nonlinear-gaussian", "mg1", "conjugate"):
        out = Path(args.out) / task
        cfg = ExperimentConfig(task=task, algorithm="snpec", rounds=args.rounds, seed=args.seed,
                               output_dir=str(out), acceptance_proposals=args.proposals)
        run_experiment(cfg)
        rates = [r["acceptance_rate"] for r in read_metrics(out / "metrics.csv")]
        print(f"{task:20s} " + "  ".join(f"{r:.4f}" for r in rates))


if __name__ == "__main__":
    main()

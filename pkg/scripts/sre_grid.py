"""Spread of the learned SRE log-ratio around the analytic one on the conjugate task.

The learned ratio is compared with log p(theta|x0) - log p(theta) on a
10x10 grid spanning +-3 posterior standard deviations.

    python scripts/sre_grid.py --seeds 3 --sims 1000 --rounds 2
"""
import argparse

from clfi.validation import sre_conjugate_grid_std


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--sims", type=int, default=1000)
    ap.add_argument("--rounds", type=int, default=2)
    args = ap.parse_args()
    for seed in range(args.seeds):
        print(f"seed {seed}: grid std {sre_conjugate_grid_std(seed, rounds=args.rounds, sims=args.sims):.3f}")


if __name__ == "__main__":
    main()

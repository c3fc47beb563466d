"""Final -log p(theta*) on the conjugate task as the number of atoms K varies.

    python scripts/k_effect.py --seeds 10 --K 2,10,50,100
"""
import argparse

import numpy as np

from clfi.validation import conjugate_final_nlp


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--K", default="2,100")
    ap.add_argument("--rounds", type=int, default=2)
    args = ap.parse_args()

    for K in (int(k) for k in args.K.split(",")):
        vals = [conjugate_final_nlp(K, s, rounds=args.rounds) for s in range(args.seeds)]
        print(f"K={K:4d}  mean {np.mean(vals):.3f}  sd {np.std(vals):.3f}")


if __name__ == "__main__":
    main()

"""Fraction of classifiers carrying 90% of the weight as p grows."""
import argparse

import numpy as np

from transferseg.metrics import weight_concentration


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sources", type=int, default=20)
    ap.add_argument("--trials", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    p_grid = [0, 1, 2, 5, 10, 20, 50, 200]
    rng = np.random.default_rng(args.seed)
    fractions = np.zeros((args.trials, len(p_grid)))
    for t in range(args.trials):
        d = rng.uniform(0.0, 1.0, size=args.sources)
        fractions[t] = [f for _, f in weight_concentration(d, p_grid)]
    for p, f in zip(p_grid, fractions.mean(axis=0)):
        print(f"p={p:<4} fraction={f:.3f}")


if __name__ == "__main__":
    main()

"""Comparison check on randomly drawn ordered pairs.

Reports the smallest min(Y1 - Y2) seen and the seed of the worst pair.
"""
import argparse
import time

import numpy as np

from gbsvie.verify import compare_solutions, random_ordered_pair


def main():
    ap = argparse.ArgumentParser(description="random ordered pairs")
    ap.add_argument("--pairs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--nt", type=int, default=40)
    ap.add_argument("--chained", action="store_true")
    args = ap.parse_args()

    t0 = time.perf_counter()
    worst, worst_i = np.inf, -1
    for i in range(args.pairs):
        rng = np.random.default_rng([args.seed, i])
        s1, s2 = random_ordered_pair(rng, n_t=args.nt)
        rep = compare_solutions(s1, s2, chained=args.chained)
        if rep.min_gap < worst:
            worst, worst_i = rep.min_gap, i
        if not rep.passed:
            print(f"pair {i}: {rep.to_dict()['verdict']} min gap {rep.min_gap:.3e} at {rep.argmin}")
    print(f"{args.pairs} pairs, worst min gap {worst:.3e} (pair {worst_i}), {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()

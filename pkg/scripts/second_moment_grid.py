"""Worst-case second moment on the reference lattice, with timing.

    python scripts/second_moment_grid.py --nt 100 200 400
"""
import argparse
import time

from gbsvie.engine import g_expectation
from gbsvie.model import SpaceGrid, TimeGrid, VolatilityBand


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nt", type=int, nargs="+", default=[100, 200, 400])
    ap.add_argument("--half-width", type=float, default=6.0)
    ap.add_argument("--lo", type=float, default=0.5)
    ap.add_argument("--hi", type=float, default=1.0)
    args = ap.parse_args()

    band = VolatilityBand(args.lo, args.hi)
    print(f"{'n_t':>6} {'n_x':>6} {'E[x^2]':>14} {'E[-x^2]':>14} {'sec':>7}")
    for n_t in args.nt:
        tg = TimeGrid(1.0, n_t)
        xg = SpaceGrid.symmetric(args.half_width, n_t + 1)
        t0 = time.perf_counter()
        up = g_expectation("x^2", band, tg, xg)
        down = g_expectation("-x^2", band, tg, xg)
        print(f"{n_t:>6} {xg.n_x:>6} {up:>14.10f} {down:>14.10f} {time.perf_counter() - t0:>7.3f}")


if __name__ == "__main__":
    main()

"""Error of Y(0, 0) against a closed form over a ladder of time grids.

The default payoff |x| has worst-case value sqrt(2/pi) under sigma_hi = 1;
x^2 is reproduced exactly by the stencil, so it is not useful here.
"""
import argparse
import math
import time

import numpy as np

from gbsvie.bsvie import solve_bsvie
from gbsvie.model import ProblemSpec


def main():
    ap = argparse.ArgumentParser(description="time grid convergence table")
    ap.add_argument("--terminal", default="abs(x)")
    ap.add_argument("--reference", type=float, default=math.sqrt(2 / math.pi))
    ap.add_argument("--nt", type=int, nargs="+", default=[25, 50, 100, 200, 400])
    args = ap.parse_args()

    prev = None
    print(f"{'n_t':>6} {'n_x':>6} {'Y(0,0)':>14} {'error':>11} {'order':>6} {'sec':>7}")
    for n_t in args.nt:
        spec = ProblemSpec.build(generator="0", terminal=args.terminal, n_t=n_t, n_x=n_t + 1, half_width=6.0)
        t0 = time.perf_counter()
        y0 = float(np.interp(0.0, spec.xgrid.nodes, solve_bsvie(spec, field_anchors=[0]).Y[0]))
        err = abs(y0 - args.reference)
        order = "" if prev is None or err == 0 else f"{math.log2(prev / err):.2f}"
        print(f"{n_t:>6} {spec.xgrid.n_x:>6} {y0:>14.10f} {err:>11.3e} {order:>6} {time.perf_counter() - t0:>7.2f}")
        prev = err


if __name__ == "__main__":
    main()

"""Acceptance criteria 1-7, each at its stated tolerance.

Every test appends one ``criterion N: PASS|FAIL ...`` line that is printed
in the terminal summary (and to stdout with ``-s``).
"""
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from gbsvie.bsvie import picard_sweep, residual_norm, solve_bsvie, solve_bsvie_no_y
from gbsvie.engine import g_expectation
from gbsvie.model import ProblemSpec, SpaceGrid, TimeGrid, VolatilityBand, VolControl, validate_problem
from gbsvie.paths import mc_lower_bound, reconstruct_k_batch, simulate_paths
from gbsvie.verify import compare_solutions, continuity_report, random_ordered_pair, refinement_check

BAND = VolatilityBand(0.5, 1.0)
TG400 = TimeGrid(1.0, 400)
XG401 = SpaceGrid.symmetric(6.0, 401)


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def spec400(terminal: str, generator: str = "0") -> ProblemSpec:
    return ProblemSpec.build(generator=generator, terminal=terminal, n_t=400, n_x=401, half_width=6.0)


def test_criterion_1_worst_case_second_moment():
    t0 = time.perf_counter()
    up = g_expectation("x^2", BAND, TG400, XG401)
    down = g_expectation("-x^2", BAND, TG400, XG401)
    elapsed = time.perf_counter() - t0
    ok = abs(up - 1.0) <= 5e-3 and abs(down + 0.25) <= 5e-3 and elapsed < 10.0
    report(1, ok, f"E[x^2]={up:.10f} E[-x^2]={down:.10f} runtime={elapsed:.2f}s")
    assert ok


def test_criterion_2_classical_volterra():
    s = ProblemSpec.build(generator="0.5*y", terminal="1", sigma_lo=1.0, sigma_hi=1.0, n_t=100, lipschitz=0.5)
    anchors = list(range(0, 101, 10))
    b = solve_bsvie(s, field_anchors=anchors)
    err = float(np.max(np.abs(b.Y - np.exp(0.5 * (1 - s.tgrid.times))[:, None])))
    ratios = [r for lg in b.diagnostics["plan"]["intervals"] for r in lg["ratios"]]
    batch = simulate_paths(VolControl.constant(1.0, s.tgrid.n_t), s, 2000, seed=2)
    kmax = max(float(np.max(np.abs(reconstruct_k_batch(b, batch, i)))) for i in anchors)
    ok = err <= 1e-2 and max(ratios) <= 0.75 and kmax <= 5e-2
    report(2, ok, f"max|Y-exp|={err:.3e} max ratio={max(ratios):.3g} max|K|={kmax:.3e}")
    assert ok


def test_criterion_3_k_identity():
    s = spec400("x^2")
    validate_problem(s)
    b = solve_bsvie(s, field_anchors=[0])
    n = s.tgrid.n_t
    controls = [
        VolControl.constant(1.0, n, "hi"),
        VolControl.constant(0.5, n, "lo"),
        VolControl.feedback(b.sig_star, s.xgrid, 0),
    ]
    frac_ok, kmax = 1.0, -np.inf
    for i, c in enumerate(controls):
        batch = simulate_paths(c, s, 10_000, seed=100 + i)
        K = reconstruct_k_batch(b, batch, 0)
        gap = np.abs(K - (batch.quad_var.sum(axis=1) - 1.0))
        frac_ok = min(frac_ok, float(np.mean(gap <= 5e-2)))
        kmax = max(kmax, float(np.max(K)))
    # mean checks use Gaussian shocks: under +-1 shocks K is deterministic per control and the
    # standard error degenerates to round-off
    means = {}
    for i, (c, target) in enumerate([(controls[0], 0.0), (controls[1], -0.75)]):
        batch = simulate_paths(c, s, 10_000, seed=200 + i, increments="gaussian")
        K = reconstruct_k_batch(b, batch, 0)
        se = float(K.std(ddof=1) / math.sqrt(K.size))
        means[c.label] = (float(K.mean()), se, abs(K.mean() - target) <= 3 * se)
    ok = frac_ok >= 0.99 and kmax <= 5e-2 and all(m[2] for m in means.values())
    report(
        3,
        ok,
        f"identity within 5e-2 on {frac_ok:.2%} of paths; max K={kmax:.2e}; "
        + "; ".join(f"mean K[{k}]={m:.4f}+-{se:.4f}" for k, (m, se, _) in means.items()),
    )
    assert ok


def test_criterion_4_comparison_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(20240601)
    worst = math.inf
    for _ in range(20):
        s1, s2 = random_ordered_pair(rng)
        worst = min(worst, compare_solutions(s1, s2, cmp_tol=1e-6).min_gap)
    s2 = ProblemSpec.build(generator="0.3*cos(x + s - t)", terminal="abs(x) - 0.2*x", n_t=40, half_width=4)
    s1 = ProblemSpec.build(generator="0.3*cos(x + s - t) + 1", terminal="abs(x) - 0.2*x", n_t=40, half_width=4)
    d = solve_bsvie(s1).Y - solve_bsvie(s2).Y
    shift_err = float(np.max(np.abs(d - (1 - s1.tgrid.times)[:, None])))
    elapsed = time.perf_counter() - t0
    ok = worst >= -1e-6 and shift_err <= 1e-9 and elapsed < 120
    report(4, ok, f"min gap over 20 pairs={worst:.3e} unit-bump shift error={shift_err:.2e} runtime={elapsed:.1f}s")
    assert ok


def test_criterion_5_sandwich():
    rows = []
    ok = True
    for payoff in ("x^2", "-x^2", "abs(x)", "sin(3*x)"):
        s = spec400(payoff)
        b = solve_bsvie(s, field_anchors=[0])
        lattice = float(np.interp(0.0, s.xgrid.nodes, b.Y[0]))
        ctrls = [
            VolControl.constant(0.5, 400, "lo"),
            VolControl.constant(1.0, 400, "hi"),
            VolControl.feedback(b.sig_star, s.xgrid, 0),
        ]
        batches = [simulate_paths(c, s, 20_000, seed=300 + i, increments="gaussian") for i, c in enumerate(ctrls)]
        est = mc_lower_bound(payoff, batches)
        good = est.value <= lattice + 3 * est.stderr
        if payoff == "abs(x)":
            good = good and abs(lattice - math.sqrt(2 / math.pi)) <= 5e-3
        ok = ok and good
        rows.append(f"{payoff}: mc={est.value:.4f}+-{est.stderr:.4f} ({est.best}) lattice={lattice:.5f}")
    report(5, ok, "; ".join(rows))
    assert ok


def test_criterion_6_contraction_and_frozen_tail():
    s = ProblemSpec.build(generator="0.6*sin(y) + 0.2*y + 0.1*sin(z)", terminal="cos(x) + 0.1*x^2", n_t=80, lipschitz=0.9)
    snaps = []
    b = solve_bsvie(s, on_accept=lambda lo, hi, Y: snaps.append((lo, Y[lo:].copy())))
    dt = s.tgrid.dt
    moves = []
    for lg in b.diagnostics["plan"]["intervals"]:
        lo, hi = lg["lo"], lg["hi"]
        res = picard_sweep(s, lo, hi, b.Y, b.Y[lo : hi + 1])
        moves.append(residual_norm(res.diag, b.Y[lo : hi + 1], dt, s.alpha))
    fixed_ok = max(moves) <= s.picard.tol
    tails_ok = all(np.array_equal(b.Y[lo:], tail) for lo, tail in snaps) and np.array_equal(solve_bsvie(s).Y, b.Y)
    s0 = ProblemSpec.build(generator="0.3*sin(z) + cos(x + s - t)", terminal="abs(x)", n_t=80)
    a, c = solve_bsvie(s0), solve_bsvie_no_y(s0)
    bitwise = np.array_equal(a.Y, c.Y) and all(np.array_equal(a.Z.anchor(i), c.Z.anchor(i)) for i in c.Z.anchors)
    ok = fixed_ok and tails_ok and bitwise
    report(6, ok, f"post-convergence move={max(moves):.2e} (tol {s.picard.tol:g}); tails bitwise={tails_ok}; no-y bitwise={bitwise}")
    assert ok


def test_criterion_7_refinement_and_continuity():
    s = ProblemSpec.build(terminal="(1 - t)*x", n_t=50)
    m = continuity_report(solve_bsvie(s), with_k=False)["m_Y"][0]
    lin_err = abs(m - s.tgrid.dt * s.xgrid.x_max)
    rng = np.random.default_rng(7)
    flags = []
    for _ in range(3):
        a, bb, c, k, d = rng.uniform(0.1, 0.6), rng.uniform(-0.3, 0.3), rng.uniform(-0.2, 0.2), rng.uniform(0.5, 2), rng.uniform(0, 1)
        sp = ProblemSpec.build(
            generator=f"{a!r}*sin(y) + {bb!r}*cos(x + s - t) + {c!r}*sin(z)",
            terminal=f"cos({k!r}*x)*(1 + {d!r}*t)",
            n_t=20,
            half_width=4.0,
            lipschitz=1.0,
        )
        rc = refinement_check(sp, n_paths=2000, seed=11)
        mono = all(rc["coarse"]["monotone_in_h"].values()) and all(rc["fine"]["monotone_in_h"].values())
        flags.append((mono, all(rc["decreasing"].values())))
    ok = lin_err <= 1e-9 and all(f[0] and f[1] for f in flags)
    report(7, ok, f"|m_Y(dt)-dt*x_max|={lin_err:.1e}; (monotone in h, decreasing under refinement) per spec: {flags}")
    assert ok

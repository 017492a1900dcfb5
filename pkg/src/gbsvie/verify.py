"""Checks built on solved bundles: comparison, a priori ratios, continuity moduli.

None of these prove anything. The comparison harness refuses to give a
verdict unless the ordering and monotonicity hypotheses hold on a probe
lattice, and the estimate checks only report ratios, since the constants in
the underlying inequalities are not explicit.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .bsvie import residual_norm, solve_bsvie
from .engine import backward_sweep, g_function
from .model import (
    GeneratorSpec,
    PicardConfig,
    ProblemSpec,
    SolutionBundle,
    TerminalFamily,
    ValidationError,
    VolControl,
)
from .paths import reconstruct_k_batch, simulate_paths

log = logging.getLogger(__name__)


class AuditError(ValueError):
    """Comparison hypotheses fail on the probe lattice; no verdict is given."""


# --------------------------------------------------------------------------
# comparison


@dataclass
class AuditResult:
    terminal_gap: float  # min over grid of Phi1 - Phi2
    generator_gap: float  # min over probe of F1 - F2
    monotone: tuple  # (F1 y-monotone, F2 y-monotone)

    def to_dict(self):
        return {
            "terminal_gap": self.terminal_gap,
            "generator_gap": self.generator_gap,
            "f1_y_monotone": self.monotone[0],
            "f2_y_monotone": self.monotone[1],
        }


@dataclass
class ComparisonReport:
    min_gap: float
    argmin: tuple  # (i, j)
    cmp_tol: float
    audit: AuditResult
    chained: bool = False
    ladder: list = field(default_factory=list)  # per interval: min step of the ladder per iterate
    ladder_ok: Optional[bool] = None

    @property
    def passed(self) -> bool:
        ok = self.min_gap >= -self.cmp_tol
        return ok and (self.ladder_ok is not False)

    def to_dict(self):
        return {
            "verdict": "PASS" if self.passed else "FAIL",
            "min_gap": self.min_gap,
            "argmin": list(self.argmin),
            "cmp_tol": self.cmp_tol,
            "audit": self.audit.to_dict(),
            "chained": self.chained,
            "ladder": self.ladder,
            "ladder_ok": self.ladder_ok,
        }


def _same_discretization(a: ProblemSpec, b: ProblemSpec) -> bool:
    return a.band == b.band and a.tgrid == b.tgrid and a.xgrid == b.xgrid and a.substeps == b.substeps


def _probe_axes(spec: ProblemSpec, n: int, box: float):
    n_t = spec.tgrid.n_t
    idx = np.unique(np.linspace(0, n_t, min(n, n_t + 1)).round().astype(int))
    times = spec.tgrid.times[idx]
    xs = np.linspace(spec.xgrid.x_min, spec.xgrid.x_max, n)
    lat = np.linspace(-box, box, n)
    return times, xs, lat


def _y_monotone(gen: GeneratorSpec, times, xs, lat, rtol: float) -> bool:
    if not gen.depends_on_y:
        return True
    # y is the axis the check runs along, so it gets a finer lattice
    lat_y = np.linspace(lat[0], lat[-1], 4 * (lat.size - 1) + 1)
    t = times[:, None, None, None, None]
    s = times[None, :, None, None, None]
    x = xs[None, None, :, None, None]
    y = lat_y[None, None, None, :, None]
    z = lat[None, None, None, None, :]
    v = np.broadcast_to(gen(t, s, x, y, z), (times.size, times.size, xs.size, lat_y.size, lat.size))
    v = v[np.triu_indices(times.size)]  # s >= t
    diff = np.diff(v, axis=2)
    scale = 1.0 + np.max(np.abs(v))
    return bool(np.all(diff >= -rtol * scale))


def audit_pair(
    spec1: ProblemSpec, spec2: ProblemSpec, probe_points: int = 9, probe_box: float = 5.0, rtol: float = 1e-12
) -> AuditResult:
    """Check the ordering and monotonicity hypotheses; raise AuditError if they fail."""
    if not _same_discretization(spec1, spec2):
        raise ValidationError("comparison needs identical band, grids and sub-step count")
    t = spec1.tgrid.times[:, None]
    x = spec1.xgrid.nodes[None, :]
    phi_gap = np.broadcast_to(spec1.terminal(t, x) - spec2.terminal(t, x), (t.size, x.size))
    tgap = float(np.min(phi_gap))

    times, xs, lat = _probe_axes(spec1, probe_points, probe_box)
    T_, S_, X_, Y_, Z_ = np.meshgrid(times, times, xs, lat, lat, indexing="ij", sparse=True)
    f_gap = np.broadcast_to(spec1.gen(T_, S_, X_, Y_, Z_) - spec2.gen(T_, S_, X_, Y_, Z_), (times.size,) * 2 + (xs.size,) + (lat.size,) * 2)
    fgap = float(np.min(f_gap[np.triu_indices(times.size)]))

    mono = (
        _y_monotone(spec1.gen, times, xs, lat, rtol),
        _y_monotone(spec2.gen, times, xs, lat, rtol),
    )
    res = AuditResult(tgap, fgap, mono)
    problems = []
    if tgap < -rtol * (1.0 + np.max(np.abs(phi_gap))):
        problems.append(f"terminal ordering fails (min Phi1-Phi2 = {tgap:.3g})")
    if fgap < -rtol * (1.0 + np.max(np.abs(f_gap))):
        problems.append(f"generator ordering fails on the probe lattice (min F1-F2 = {fgap:.3g})")
    if not any(mono):
        problems.append("neither generator is non-decreasing in y on the probe lattice")
    if problems:
        raise AuditError("; ".join(problems))
    return res


def compare_solutions(
    spec1: ProblemSpec,
    spec2: ProblemSpec,
    chained: bool = False,
    cmp_tol: float = 1e-6,
    probe_points: int = 9,
    probe_box: float = 5.0,
) -> ComparisonReport:
    """Solve both problems and report ``min_{i,j} (Y1 - Y2)``.

    In chained mode the y-monotone problem is solved with Picard iterates
    seeded at the other solution, and every iterate is checked against the
    previous one: the sequence must climb (F1 monotone) or descend (only F2
    monotone) nodewise.
    """
    audit = audit_pair(spec1, spec2, probe_points, probe_box)
    ladder: list = []
    ladder_ok = None
    if not chained:
        Y1 = solve_bsvie(spec1, field_anchors=[]).Y
        Y2 = solve_bsvie(spec2, field_anchors=[]).Y
    else:
        up = audit.monotone[0]
        first, second = (spec2, spec1) if up else (spec1, spec2)
        Ya = solve_bsvie(first, field_anchors=[]).Y
        sign = 1.0 if up else -1.0
        trace: dict = {}

        def on_iterate(lo, hi, n, y_new, y_prev):
            trace.setdefault((lo, hi), []).append(float(np.min(sign * (y_new - y_prev))))

        Yb = solve_bsvie(second, field_anchors=[], init=Ya, on_iterate=on_iterate)
        Y1, Y2 = (Yb.Y, Ya) if up else (Ya, Yb.Y)
        ladder = [{"lo": lo, "hi": hi, "direction": "up" if up else "down", "min_step": v} for (lo, hi), v in trace.items()]
        ladder_ok = all(m >= -cmp_tol for row in ladder for m in row["min_step"])
    gap = Y1 - Y2
    j = np.unravel_index(int(np.argmin(gap)), gap.shape)
    return ComparisonReport(
        min_gap=float(gap[j]),
        argmin=(int(j[0]), int(j[1])),
        cmp_tol=cmp_tol,
        audit=audit,
        chained=chained,
        ladder=ladder,
        ladder_ok=ladder_ok,
    )


def random_ordered_pair(
    rng: np.random.Generator,
    n_t: int = 40,
    T: float = 1.0,
    sigma_lo: float = 0.5,
    sigma_hi: float = 1.0,
    half_width: float = 4.0,
) -> tuple[ProblemSpec, ProblemSpec]:
    """A pair with Phi1 >= Phi2, F1 >= F2 and F1, F2 non-decreasing in y.

    The z coefficient is kept small so the centred first difference does
    not break monotonicity of the scheme (cell Peclet number below one).
    """

    def r(lo, hi):
        return float(rng.uniform(lo, hi))

    phi2 = f"{r(-1, 1):.6f}*cos({r(0.5, 2):.6f}*x + {r(0, 3):.6f}*t) + {r(0, 0.3):.6f}*x^2 - {r(0, 1):.6f}*t*x"
    bump_phi = f"{r(0, 0.5):.6f}*exp(-(x - {r(-2, 2):.6f})^2) + {r(0, 0.2):.6f}*pos(sin({r(1, 3):.6f}*x))"
    f2 = (
        f"{r(0, 0.8):.6f}*y + {r(-0.3, 0.3):.6f}*sin(z) + {r(-0.5, 0.5):.6f}*cos(x + s - t)"
        f" + {r(0, 0.3):.6f}*max(y, 0)"
    )
    bump_f = f"{r(0, 0.5):.6f}*exp(-(x - {r(-2, 2):.6f})^2) + {r(0, 0.3):.6f}*(s - t) + {r(0, 0.2):.6f}*pos(y)"
    picard = PicardConfig(delta_init=T / 2)
    common = dict(sigma_lo=sigma_lo, sigma_hi=sigma_hi, T=T, n_t=n_t, half_width=half_width, lipschitz=1.5, picard=picard)
    s2 = ProblemSpec.build(generator=f2, terminal=phi2, **common)
    s1 = ProblemSpec.build(generator=f"{f2} + {bump_f}", terminal=f"{phi2} + {bump_phi}", **common)
    return s1, s2


# --------------------------------------------------------------------------
# a priori diagnostics


def _g_step(V: np.ndarray, spec: ProblemSpec) -> np.ndarray:
    dx = spec.xgrid.dx
    h = spec.tgrid.dt / spec.substeps
    for _ in range(spec.substeps):
        d2 = np.zeros_like(V)
        d2[..., 1:-1] = (V[..., 2:] - 2.0 * V[..., 1:-1] + V[..., :-2]) / (dx * dx)
        V = V + h * g_function(d2, spec.band)
    return V


def lattice_expectation_from_zero(spec: ProblemSpec, values: np.ndarray, x0: float = 0.0) -> np.ndarray:
    """``E[i] = Ê[values[i](x0 + B_{t_i})]`` for every row ``i`` (row ``i`` lives at ``t_i``)."""
    n_t = spec.tgrid.n_t
    V = np.array(values, dtype=float)
    for k in range(n_t - 1, -1, -1):
        V[k + 1 :] = _g_step(V[k + 1 :], spec)
    return np.array([np.interp(x0, spec.xgrid.nodes, V[i]) for i in range(n_t + 1)])


def _pow(a, alpha):
    return np.abs(a) ** alpha


def _driver_integrals(spec: ProblemSpec) -> np.ndarray:
    """``int_{t_i}^T sup_x |F(t_i, s, x, 0, 0)| ds`` by left Riemann sums, one value per anchor."""
    t = spec.tgrid.times
    x = spec.xgrid.nodes
    dt = spec.tgrid.dt
    n_t = spec.tgrid.n_t
    out = np.zeros(n_t + 1)
    for i in range(n_t):
        s = t[i:n_t][:, None]
        f0 = np.broadcast_to(np.abs(spec.gen(t[i], s, x[None, :], 0.0, 0.0)), (s.shape[0], x.size))
        out[i] = dt * float(np.sum(np.max(f0, axis=1)))
    return out


def _safe_ratio(num, den):
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    out = np.zeros(np.broadcast(num, den).shape)
    pos = den > 0
    out[pos] = (num * np.ones_like(out))[pos] / (den * np.ones_like(out))[pos]
    out[~pos & (num * np.ones_like(out) > 0)] = np.inf
    return out


def apriori_diagnostics(
    bundle: SolutionBundle, spec: ProblemSpec | None = None, perturb: float | None = 0.01, x0: float = 0.0
) -> dict:
    """Ratios of solution sizes to data sizes.

    pointwise: ``max_j |Y(t_i, x_j)|^a / max_j (Ê_{t_i}[|Phi(t_i, x_j + B_T - B_{t_i})|^a] + (int sup|f0|)^a)``
    integrated: ``sum_i dt Ê[|Y(t_i, B_{t_i})|^a]`` over the same sum for the data
    perturbation: ``||dY|| / (eps ||Phi||)`` for ``Phi -> (1 + eps) Phi``
    """
    spec = spec or bundle.spec
    a = spec.alpha
    dt = spec.tgrid.dt
    n_t = spec.tgrid.n_t
    t = spec.tgrid.times
    x = spec.xgrid.nodes
    Y = bundle.Y

    f0_int = _driver_integrals(spec)
    phi_pow = replace(spec, gen=GeneratorSpec("0"), terminal=TerminalFamily(f"abs({spec.terminal.expr})^{a!r}"))
    cond = backward_sweep(phi_pow, 0, n_t, store_fields=False).diag  # Ê_{t_i}[|Phi(t_i, .)|^a]
    rhs_pt = np.max(cond, axis=1) + f0_int ** a
    lhs_pt = np.max(_pow(Y, a), axis=1)
    ratio_pt = _safe_ratio(lhs_pt, rhs_pt)

    lhs_int = dt * float(np.sum(lattice_expectation_from_zero(spec, _pow(Y, a), x0)))
    phiT = np.broadcast_to(_pow(spec.terminal(t[:, None], x[None, :]), a), (n_t + 1, x.size))
    V = np.array(phiT, dtype=float)
    for _ in range(n_t):
        V = _g_step(V, spec)
    e_phi = np.array([np.interp(x0, x, V[i]) for i in range(n_t + 1)])
    rhs_int = dt * float(np.sum(e_phi + f0_int ** a))
    ratio_int = float(_safe_ratio(lhs_int, rhs_int))

    report = {
        "alpha": a,
        "pointwise_ratio": ratio_pt.tolist(),
        "pointwise_ratio_max": float(np.max(ratio_pt)),
        "integrated_lhs": lhs_int,
        "integrated_rhs": rhs_int,
        "integrated_ratio": ratio_int,
    }
    if bundle.Z is not None and bundle.Z.anchors:
        report["z_norm"] = bundle.Z.norm(dt, a)
    if perturb:
        sp = replace(spec, terminal=TerminalFamily(f"{1.0 + perturb!r}*({spec.terminal.expr})"))
        Yp = solve_bsvie(sp, field_anchors=[]).Y
        dY = residual_norm(Yp, Y, dt, a)
        phi_norm = residual_norm(phiT ** (1.0 / a), 0.0 * phiT, dt, a)
        report["perturbation_eps"] = perturb
        report["perturbation_ratio"] = float(_safe_ratio(dY, perturb * phi_norm))
    vals = [report["pointwise_ratio_max"], ratio_int, report.get("perturbation_ratio", 0.0)]
    report["finite"] = bool(np.all(np.isfinite(vals)))
    return report


def apriori_stability(spec: ProblemSpec, rel: float = 0.1, perturb: float = 0.01) -> dict:
    """Run the a priori diagnostics at ``spec`` and at ``spec.refined(2)``; ratios must agree within ``rel``."""
    out = {}
    for name, sp in (("coarse", spec), ("fine", spec.refined(2))):
        b = solve_bsvie(sp, field_anchors=[])
        out[name] = apriori_diagnostics(b, sp, perturb=perturb)
    keys = ["pointwise_ratio_max", "integrated_ratio"] + (["perturbation_ratio"] if perturb else [])
    changes = {}
    for k in keys:
        c, f = out["coarse"][k], out["fine"][k]
        changes[k] = 0.0 if c == f else abs(f - c) / max(abs(c), abs(f))
    out["relative_change"] = changes
    out["stable"] = all(v <= rel for v in changes.values())
    return out


# --------------------------------------------------------------------------
# continuity


def _cummax(vals: Sequence[float]) -> list[float]:
    return np.maximum.accumulate(np.asarray(vals, dtype=float)).tolist()


def modulus_y(Y: np.ndarray, lags: Sequence[int]) -> list[float]:
    """``m(h) = max_{|i - i'| <= h} max_j |Y[i, j] - Y[i', j]|`` at ``h = lag * dt``."""
    per = [float(np.max(np.abs(Y[d:] - Y[:-d]))) if d < Y.shape[0] else 0.0 for d in range(1, max(lags) + 1)]
    cm = _cummax(per)
    return [cm[l - 1] for l in lags]


def modulus_z(Z, dt: float, alpha: float, lags: Sequence[int]) -> list[float]:
    """H-norm modulus of the rows ``Z(t_i, .)`` over the shared part of the triangle."""
    anchors = Z.anchors
    pos = {a: n for n, a in enumerate(anchors)}
    per = []
    for d in range(1, max(lags) + 1):
        m = 0.0
        for a in anchors:
            b = a + d
            if b not in pos:
                continue
            za, zb = Z.anchor(a), Z.anchor(b)
            diff = np.max(np.abs(za[d:] - zb), axis=1)  # rows k = b..n_t
            m = max(m, float(np.sum(dt * diff ** alpha) ** (1.0 / alpha)))
        per.append(m)
    cm = _cummax(per)
    return [cm[l - 1] for l in lags]


def modulus_k(mean_k: np.ndarray, lags: Sequence[int]) -> list[float]:
    return modulus_y(np.asarray(mean_k, dtype=float)[:, None], lags)


def continuity_report(
    bundle: SolutionBundle,
    n_paths: int = 2000,
    seed: int = 0,
    lags: Sequence[int] = (1, 2, 4),
    with_k: bool = True,
) -> dict:
    """Discrete moduli of ``Y``, ``Z`` and mean ``K(t_i, T)`` at ``h = lag * dt``.

    K is reconstructed for every anchor on one batch of paths driven by the
    anchor-0 feedback control (common random numbers across anchors).
    Requires Z at every anchor.
    """
    spec = bundle.spec
    dt = spec.tgrid.dt
    n_t = spec.tgrid.n_t
    lags = [int(l) for l in lags]
    out = {"h": [l * dt for l in lags], "lags": lags}
    out["m_Y"] = modulus_y(bundle.Y, lags)
    out["m_Z"] = modulus_z(bundle.Z, dt, spec.alpha, lags)
    if with_k:
        ctrl = VolControl.feedback(bundle.sig_star, spec.xgrid, anchor=0)
        batch = simulate_paths(ctrl, spec, n_paths, seed)
        mean_k = np.array([reconstruct_k_batch(bundle, batch, i).mean() for i in range(n_t + 1)])
        out["mean_K"] = mean_k.tolist()
        out["m_K"] = modulus_k(mean_k, lags)
        out["seed"] = seed
        out["n_paths"] = n_paths
    names = [k for k in ("m_Y", "m_Z", "m_K") if k in out]
    out["monotone_in_h"] = {k: bool(np.all(np.diff(out[k]) >= 0)) for k in names}
    return out


def refinement_check(spec: ProblemSpec, n_paths: int = 2000, seed: int = 0, lags=(1, 2, 4)) -> dict:
    """Continuity reports on ``spec`` and ``spec.refined(2)`` (dt and dx halved, per-substep CFL fixed).

    ``decreasing[name]`` compares the moduli at the first lag of each grid.
    """
    coarse = continuity_report(solve_bsvie(spec), n_paths, seed, lags)
    fine = continuity_report(solve_bsvie(spec.refined(2)), n_paths, seed, lags)
    dec = {}
    for k in ("m_Y", "m_Z", "m_K"):
        if k in coarse and k in fine:
            dec[k] = bool(fine[k][0] <= coarse[k][0])
    return {"coarse": coarse, "fine": fine, "decreasing": dec}


__all__ = [
    "AuditError",
    "AuditResult",
    "ComparisonReport",
    "apriori_diagnostics",
    "apriori_stability",
    "audit_pair",
    "compare_solutions",
    "continuity_report",
    "lattice_expectation_from_zero",
    "modulus_y",
    "modulus_z",
    "random_ordered_pair",
    "refinement_check",
]

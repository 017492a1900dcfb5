"""Domain types, grid geometry and the assumption-proxy audit.

Everything here is immutable after construction. Problems are Markovian:
the terminal family is ``Phi(t, B_T)`` and the generator is
``F(t, s, B_s, y, z)``, both written in the expression language of
:mod:`gbsvie.expr`.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .expr import Expression, ExpressionError, parse_expression

log = logging.getLogger(__name__)

DEFAULT_EPS_LIP = 0.05
DEFAULT_PROBE_BOX = 10.0
DEFAULT_PROBE_POINTS = 32


class ValidationError(ValueError):
    """Hard validation failure (malformed band/grid, CFL breach, non-finite data)."""


class CFLError(ValidationError):
    pass


@dataclass(frozen=True)
class VolatilityBand:
    sigma_lo: float
    sigma_hi: float

    def __post_init__(self):
        lo, hi = self.sigma_lo, self.sigma_hi
        if not (math.isfinite(lo) and math.isfinite(hi) and 0 < lo <= hi):
            raise ValidationError(f"band violates 0<σ̲≤σ̄<∞: sigma_lo={lo}, sigma_hi={hi}")

    @property
    def var_lo(self) -> float:
        return self.sigma_lo ** 2

    @property
    def var_hi(self) -> float:
        return self.sigma_hi ** 2

    def contains(self, sigma) -> bool:
        sigma = np.asarray(sigma, dtype=float)
        return bool(np.all((sigma >= self.sigma_lo) & (sigma <= self.sigma_hi)))


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    n_t: int

    def __post_init__(self):
        if self.n_t < 2:
            raise ValidationError(f"n_t must be >= 2, got {self.n_t}")
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ValidationError(f"horizon must be positive, got {self.horizon}")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_t

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.n_t + 1) * self.dt
        t[-1] = self.horizon
        return t


@dataclass(frozen=True)
class SpaceGrid:
    x_min: float
    x_max: float
    n_x: int

    def __post_init__(self):
        if not (self.x_min < 0 < self.x_max):
            raise ValidationError(f"space grid must straddle 0: [{self.x_min}, {self.x_max}]")
        if self.n_x < 3:
            raise ValidationError(f"n_x must be >= 3, got {self.n_x}")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n_x - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_x)

    @classmethod
    def symmetric(cls, half_width: float, n_x: int) -> "SpaceGrid":
        return cls(-half_width, half_width, n_x)


@dataclass(frozen=True)
class GeneratorSpec:
    expr: Expression
    lipschitz: float = 0.0

    def __post_init__(self):
        if isinstance(self.expr, str):
            object.__setattr__(self, "expr", parse_expression(self.expr))
        if not self.lipschitz >= 0:
            raise ValidationError(f"Lipschitz constant must be >= 0, got {self.lipschitz}")

    @property
    def depends_on_y(self) -> bool:
        return self.expr.depends_on("y")

    @property
    def depends_on_z(self) -> bool:
        return self.expr.depends_on("z")

    def __call__(self, t, s, x, y, z):
        return self.expr.evaluate({"t": t, "s": s, "x": x, "y": y, "z": z})


@dataclass(frozen=True)
class TerminalFamily:
    expr: Expression
    growth_degree: int = 2

    def __post_init__(self):
        if isinstance(self.expr, str):
            object.__setattr__(self, "expr", parse_expression(self.expr))
        bad = self.expr.variables - {"t", "x"}
        if bad:
            raise ValidationError(f"terminal family may only use t and x, found {sorted(bad)}")

    def __call__(self, t, x):
        return self.expr.evaluate({"t": t, "x": x})


@dataclass(frozen=True)
class PicardConfig:
    delta_init: Optional[float] = None  # None: a quarter of the horizon
    theta: float = 0.75
    tol: float = 1e-10
    max_iter: int = 60

    def __post_init__(self):
        if not 0 < self.theta < 1:
            raise ValidationError(f"contraction threshold must lie in (0,1), got {self.theta}")
        if self.max_iter < 1:
            raise ValidationError("max_iter must be >= 1")
        if not self.tol > 0:
            raise ValidationError("tol must be > 0")


@dataclass(frozen=True)
class ProblemSpec:
    band: VolatilityBand
    tgrid: TimeGrid
    xgrid: SpaceGrid
    gen: GeneratorSpec
    terminal: TerminalFamily
    alpha: float = 2.0
    picard: PicardConfig = field(default_factory=PicardConfig)
    substeps: int = 1

    def __post_init__(self):
        if not self.alpha > 1:
            raise ValidationError(f"alpha must be > 1, got {self.alpha}")
        d = self.delta
        if not 0 < d <= self.tgrid.horizon:
            raise ValidationError(f"picard.delta_init must lie in (0, T], got {d}")
        if self.substeps < 1:
            raise ValidationError("substeps must be >= 1")

    @property
    def delta(self) -> float:
        d = self.picard.delta_init
        return 0.25 * self.tgrid.horizon if d is None else d

    @property
    def effective_cfl(self) -> float:
        return cfl_number(self) / self.substeps

    def with_auto_substeps(self) -> "ProblemSpec":
        """Return a copy whose sub-step count brings the per-substep CFL to <= 1."""
        return replace(self, substeps=auto_substeps(self.band, self.tgrid, self.xgrid))

    def refined(self, factor: int = 2) -> "ProblemSpec":
        """Multiply n_t by ``factor`` and divide dx by ``factor``.

        The sub-step count is scaled so the per-substep CFL stays unchanged.
        """
        tg = replace(self.tgrid, n_t=self.tgrid.n_t * factor)
        xg = replace(self.xgrid, n_x=(self.xgrid.n_x - 1) * factor + 1)
        return replace(self, tgrid=tg, xgrid=xg, substeps=self.substeps * factor)

    @classmethod
    def build(
        cls,
        generator: str = "0",
        terminal: str = "x^2",
        sigma_lo: float = 0.5,
        sigma_hi: float = 1.0,
        T: float = 1.0,
        n_t: int = 100,
        n_x: int | None = None,
        half_width: float | None = None,
        lipschitz: float = 0.0,
        alpha: float = 2.0,
        picard: PicardConfig | None = None,
        substeps: int | str = "auto",
    ) -> "ProblemSpec":
        """Convenience constructor used by tests and scripts."""
        band = VolatilityBand(sigma_lo, sigma_hi)
        tg = TimeGrid(T, n_t)
        if half_width is None:
            half_width = 6.0 * sigma_hi * math.sqrt(T)
        if n_x is None:
            # dx chosen so that the coarse CFL is about 1
            dx = sigma_hi * math.sqrt(tg.dt)
            n_x = 2 * int(math.ceil(half_width / dx)) + 1
        xg = SpaceGrid.symmetric(half_width, n_x)
        if substeps == "auto":
            substeps = auto_substeps(band, tg, xg)
        return cls(
            band=band,
            tgrid=tg,
            xgrid=xg,
            gen=GeneratorSpec(generator, lipschitz),
            terminal=TerminalFamily(terminal),
            alpha=alpha,
            picard=picard or PicardConfig(),
            substeps=int(substeps),
        )


def cfl_number(spec: ProblemSpec) -> float:
    """sigma_hi^2 * dt / dx^2 on the coarse time grid."""
    return spec.band.var_hi * spec.tgrid.dt / spec.xgrid.dx ** 2


def auto_substeps(band: VolatilityBand, tgrid: TimeGrid, xgrid: SpaceGrid) -> int:
    c = band.var_hi * tgrid.dt / xgrid.dx ** 2
    # guard against ceil(1.0000000000000002)
    return max(1, int(math.ceil(c - 1e-12)))


@dataclass
class ValueSurface:
    """Value, gradient and optimizer of one parameterized G-BSDE.

    Rows are indexed by absolute time index ``k`` in ``[t_index, n_t]``;
    ``u[k - t_index]`` is the row at time ``t_k``.
    """

    t_index: int
    u: np.ndarray
    grad: np.ndarray
    sig: np.ndarray

    def row(self, k: int) -> np.ndarray:
        if k < self.t_index:
            raise IndexError(f"time index {k} precedes anchor {self.t_index}")
        return self.u[k - self.t_index]

    @property
    def diagonal(self) -> np.ndarray:
        return self.u[0]


class TriangularField:
    """A gridded field ``z[i][k][j]`` on the triangle ``k >= i``.

    Each stored anchor ``i`` owns an array of shape ``(n_t + 1 - i, n_x)``
    whose row ``k - i`` is time ``t_k``. Anchors may be stored sparsely.
    """

    def __init__(self, n_t: int, n_x: int):
        self.n_t = n_t
        self.n_x = n_x
        self._anchors: dict[int, np.ndarray] = {}

    @classmethod
    def from_packed(cls, anchors, offsets, packed: np.ndarray, n_t: int) -> "TriangularField":
        f = cls(n_t, packed.shape[1])
        for i, off in zip(anchors, offsets):
            f._anchors[int(i)] = packed[off : off + n_t + 1 - int(i)]
        return f

    def set_anchor(self, i: int, arr: np.ndarray):
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (self.n_t + 1 - i, self.n_x):
            raise ValueError(f"anchor {i} slice must have shape {(self.n_t + 1 - i, self.n_x)}, got {arr.shape}")
        self._anchors[i] = arr

    def update(self, other: "TriangularField"):
        self._anchors.update(other._anchors)

    @property
    def anchors(self) -> list[int]:
        return sorted(self._anchors)

    def anchor(self, i: int) -> np.ndarray:
        """Rows ``k = i..n_t`` for anchor ``i``."""
        return self._anchors[i]

    def __getitem__(self, key):
        i, k = key[0], key[1]
        if k < i:
            raise IndexError(f"({i}, {k}) lies outside the triangle k >= i")
        if k > self.n_t:
            raise IndexError(f"time index {k} beyond n_t={self.n_t}")
        if i not in self._anchors:
            raise KeyError(f"anchor {i} not stored")
        row = self._anchors[i][k - i]
        return row if len(key) == 2 else row[key[2]]

    def __contains__(self, i):
        return i in self._anchors

    def norm(self, dt: float, p: float = 2.0) -> float:
        """max over space of (sum_i dt (sum_{k>=i} dt |z|^2)^{p/2})^{1/p}."""
        acc = np.zeros(self.n_x)
        for arr in self._anchors.values():
            inner = dt * np.sum(arr ** 2, axis=0)
            acc += dt * inner ** (p / 2)
        return float(np.max(acc) ** (1 / p))


@dataclass
class SolutionBundle:
    spec: ProblemSpec
    Y: np.ndarray  # (n_t+1, n_x)
    Z: TriangularField
    sig_star: TriangularField  # sigma values
    k_samples: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class VolControl:
    """A volatility control: constant, per-step schedule, or feedback on ``sig_star``."""

    kind: str
    schedule: Optional[tuple] = None
    sig_star: Optional[TriangularField] = None
    anchor: int = 0
    xgrid: Optional[SpaceGrid] = None
    label: str = ""

    @classmethod
    def constant(cls, sigma: float, n_t: int, label: str | None = None) -> "VolControl":
        return cls("piecewise", schedule=tuple([float(sigma)] * n_t), label=label or f"const({sigma:g})")

    @classmethod
    def piecewise(cls, values, label: str = "piecewise") -> "VolControl":
        return cls("piecewise", schedule=tuple(float(v) for v in values), label=label)

    @classmethod
    def feedback(cls, sig_star: TriangularField, xgrid: SpaceGrid, anchor: int = 0) -> "VolControl":
        return cls("feedback", sig_star=sig_star, anchor=anchor, xgrid=xgrid, label=f"feedback(anchor={anchor})")

    def validate(self, band: VolatilityBand):
        if self.kind == "piecewise":
            if not band.contains(self.schedule):
                raise ValidationError(f"control {self.label} leaves the band [{band.sigma_lo}, {band.sigma_hi}]")
        elif self.kind == "feedback":
            for i in self.sig_star.anchors:
                if not band.contains(self.sig_star.anchor(i)):
                    raise ValidationError("feedback field leaves the band")
        else:
            raise ValidationError(f"unknown control kind {self.kind!r}")

    def sigma_at(self, k: int, x: np.ndarray) -> np.ndarray:
        """Volatility used on [t_k, t_{k+1}] for states ``x``."""
        if self.kind == "piecewise":
            return np.full(np.shape(x), self.schedule[k])
        # before the anchor, fall back on the anchor-0 optimizer
        i = self.anchor if k >= self.anchor else self.sig_star.anchors[0]
        row = self.sig_star[i, k]
        g = self.xgrid
        j = np.clip(np.rint((x - g.x_min) / g.dx).astype(int), 0, g.n_x - 1)
        return row[j]


@dataclass
class PathBatch:
    seed: int
    n_paths: int
    dB: np.ndarray  # (n_paths, n_t)
    quad_var: np.ndarray  # (n_paths, n_t)
    control: VolControl
    dt: float
    x0: float = 0.0
    increments: str = "rademacher"

    @property
    def X(self) -> np.ndarray:
        """States at all nodes, shape (n_paths, n_t+1)."""
        out = np.empty((self.n_paths, self.dB.shape[1] + 1))
        out[:, 0] = self.x0
        np.cumsum(self.dB, axis=1, out=out[:, 1:])
        out[:, 1:] += self.x0
        return out


@dataclass(frozen=True)
class KSample:
    t_index: int
    path_id: int
    value: float


# --------------------------------------------------------------------------
# validation


@dataclass
class ProxyCheck:
    name: str
    passed: bool
    value: float
    detail: str = ""


@dataclass
class ValidationReport:
    checks: dict
    cfl: float
    effective_cfl: float
    seed: int

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    @property
    def warnings(self) -> list[str]:
        return [f"{c.name}: {c.detail}" for c in self.checks.values() if not c.passed]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "cfl": self.cfl,
            "effective_cfl": self.effective_cfl,
            "seed": self.seed,
            "checks": {
                k: {"passed": c.passed, "value": c.value, "detail": c.detail} for k, c in self.checks.items()
            },
        }


def _modulus_profile(values_by_t: np.ndarray, lags) -> list[float]:
    """max over pairs |i - i'| <= lag of max |v[i] - v[i']| for each lag."""
    out = []
    cur = 0.0
    for lag in range(1, max(lags) + 1):
        d = np.abs(values_by_t[lag:] - values_by_t[:-lag])
        cur = max(cur, float(np.max(d)) if d.size else 0.0)
        if lag in lags:
            out.append(cur)
    return out


def validate_problem(
    spec: ProblemSpec,
    seed: int = 0,
    probe_box: float = DEFAULT_PROBE_BOX,
    probe_points: int = DEFAULT_PROBE_POINTS,
    eps_lip: float = DEFAULT_EPS_LIP,
    modulus_ratio: float = 0.5,
) -> ValidationReport:
    """Audit a problem against sampled proxies of (H1)-(H4).

    Raises :class:`ValidationError` on hard failures (CFL, non-finite data).
    Proxy failures are returned in the report and logged as warnings.
    """
    cfl = cfl_number(spec)
    eff = cfl / spec.substeps
    if eff > 1 + 1e-12:
        raise CFLError(
            f"CFL violated: sigma_hi^2 dt/dx^2 = {cfl:.6g} with {spec.substeps} substep(s) "
            f"(per-substep {eff:.6g} > 1)"
        )
    rng = np.random.default_rng(seed)
    t = spec.tgrid.times
    x = spec.xgrid.nodes
    dt = spec.tgrid.dt
    checks: dict[str, ProxyCheck] = {}

    try:
        phi = np.broadcast_to(spec.terminal(t[:, None], x[None, :]), (t.size, x.size))
    except ExpressionError as exc:
        raise ValidationError(f"terminal family: {exc}") from exc
    if not np.all(np.isfinite(phi)):
        raise ValidationError("terminal family is non-finite on the grid")

    # H1/H3: F(t,s,x,0,0) finite on the grid; profile of int_t^T |F(t,s,x,0,0)| ds
    prof = np.zeros((t.size, x.size))
    for i in range(t.size):
        try:
            f0 = np.broadcast_to(spec.gen(t[i], t[i:, None], x[None, :], 0.0, 0.0), (t.size - i, x.size))
        except ExpressionError as exc:
            raise ValidationError(f"generator: {exc}") from exc
        if not np.all(np.isfinite(f0)):
            raise ValidationError(f"generator F(t,s,x,0,0) is non-finite on the grid (t={t[i]:g})")
        prof[i] = dt * np.sum(np.abs(f0[1:]), axis=0)

    # H2: sampled Lipschitz ratio in (y, z)
    n = probe_points
    lat = np.linspace(-probe_box, probe_box, n)
    yy, zz = np.meshgrid(lat, lat, indexing="ij")
    idx = rng.integers(0, t.size, size=(n, 2))
    ti = np.minimum(idx[:, 0], idx[:, 1])
    si = np.maximum(idx[:, 0], idx[:, 1])
    xj = rng.integers(0, x.size, size=n)
    tp = t[ti][:, None, None]
    sp = t[si][:, None, None]
    xp = x[xj][:, None, None]
    try:
        vals = np.broadcast_to(spec.gen(tp, sp, xp, yy[None], zz[None]), (n, n, n))
    except ExpressionError as exc:
        raise ValidationError(f"generator: {exc}") from exc
    h = lat[1] - lat[0]
    ratios = [
        np.abs(np.diff(vals, axis=1)) / h,
        np.abs(np.diff(vals, axis=2)) / h,
        np.abs(vals[:, 1:, 1:] - vals[:, :-1, :-1]) / (2 * h),
    ]
    # random far-apart pairs catch non-local behaviour
    a = rng.uniform(-probe_box, probe_box, size=(4, n, n))
    v1 = spec.gen(tp, sp, xp, a[0], a[1])
    v2 = spec.gen(tp, sp, xp, a[2], a[3])
    denom = np.abs(a[0] - a[2]) + np.abs(a[1] - a[3])
    ratios.append(np.abs(v1 - v2) / denom)
    lip = float(max(np.nanmax(r) for r in ratios))
    L = spec.gen.lipschitz
    checks["H2"] = ProxyCheck(
        "H2",
        lip <= L * (1 + eps_lip) + 1e-12,
        lip,
        f"sampled Lipschitz ratio {lip:.6g} vs declared L={L:g} (slack {eps_lip:.0%})",
    )

    sup_prof = float(np.max(prof))
    checks["H1"] = ProxyCheck("H1", True, 0.0, "generator finite at (y,z)=0 on the grid")
    checks["H3"] = ProxyCheck("H3", bool(np.isfinite(sup_prof)), sup_prof, f"sup of int|f0| profile = {sup_prof:.6g}")

    # H4: t-modulus of int_{t v t'}^T |F(t',s,.) - F(t,s,.)| ds over |y|+|z| <= N.
    # The probe set is the diamond's axes and vertices; every anchor is scanned.
    r = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])
    by = probe_box * np.concatenate([r, np.zeros(5), [0.5, 0.5, -0.5, -0.5]])
    bz = probe_box * np.concatenate([np.zeros(5), r, [0.5, -0.5, 0.5, -0.5]])
    xs = x[np.unique(np.linspace(0, x.size - 1, min(x.size, 9)).astype(int))]
    lags = [l for l in (1, 2, 4, 8) if l < spec.tgrid.n_t]
    h4 = []
    cur = 0.0
    for lag in lags:
        for i in range(spec.tgrid.n_t - lag):
            i2 = i + lag
            sv = t[i2:-1, None, None]  # left-point rule over s in [t v t', T)
            args = (sv, xs[None, :, None], by[None, None, :], bz[None, None, :])
            diff = np.abs(spec.gen(t[i2], *args) - spec.gen(t[i], *args))
            integ = dt * np.sum(np.broadcast_to(diff, (sv.shape[0], xs.size, by.size)), axis=0)
            cur = max(cur, float(np.max(integ)))
        h4.append(cur)
    h4_ok = h4[0] <= 1e-12 or h4[0] <= modulus_ratio * h4[-1] or len(h4) == 1
    checks["H4"] = ProxyCheck(
        "H4",
        bool(h4_ok),
        h4[0],
        "t-modulus at lags " + ", ".join(f"{l}dt: {m:.4g}" for l, m in zip(lags, h4))
        + ("" if h4_ok else " (modulus does not vanish as h -> 0)"),
    )

    # continuity of the terminal family in t
    mods = _modulus_profile(phi, lags)
    phi_ok = mods[0] <= 1e-12 or mods[0] <= modulus_ratio * mods[-1] or len(mods) == 1
    checks["phi_continuity"] = ProxyCheck(
        "phi_continuity",
        bool(phi_ok and all(a <= b for a, b in zip(mods, mods[1:]))),
        mods[0],
        "t-modulus of Phi at lags " + ", ".join(f"{l}dt: {m:.4g}" for l, m in zip(lags, mods)),
    )

    report = ValidationReport(checks=checks, cfl=cfl, effective_cfl=eff, seed=seed)
    for w in report.warnings:
        log.warning("assumption proxy failed: %s", w)
    return report

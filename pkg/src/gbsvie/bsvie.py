"""G-BSVIE solver: diagonal extraction plus backward local-interval Picard iteration.

Without y-dependence the solution is read off the diagonal of the
parameterized family, ``Y(t_i) = u^i(t_i)``, ``Z(t_i, s_k) = D1 u^i(s_k)``.

With y-dependence the time axis is cut into intervals of ``d`` grid steps,
processed from ``T`` backward. On each interval the Picard map is iterated
from zero while the already accepted tail of ``Y`` stays frozen; if the
observed contraction ratio exceeds ``theta`` twice in a row the interval
length is halved and the interval restarted.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .engine import SolverError, backward_sweep
from .model import ProblemSpec, SolutionBundle, TriangularField

log = logging.getLogger(__name__)


class NonContraction(SolverError):
    """Interval length fell below one grid step without observing contraction."""


@dataclass
class IntervalLog:
    lo: int
    hi: int
    residuals: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    restarts: int = 0
    converged: bool = False

    def to_dict(self):
        return {
            "lo": self.lo,
            "hi": self.hi,
            "residuals": self.residuals,
            "ratios": self.ratios,
            "restarts": self.restarts,
            "converged": self.converged,
        }


@dataclass
class IntervalPlan:
    """Accepted intervals from ``T`` backward, as inclusive index ranges."""

    dt: float
    logs: list = field(default_factory=list)

    @property
    def breakpoints(self) -> list[float]:
        """``T > T - d1 > ... >= 0`` as times."""
        if not self.logs:
            return []
        pts = [self.logs[0].hi * self.dt]
        pts += [(lg.lo - 1) * self.dt if lg.lo > 0 else 0.0 for lg in self.logs]
        return pts

    def to_dict(self):
        return {"breakpoints": self.breakpoints, "intervals": [lg.to_dict() for lg in self.logs]}


def residual_norm(y_new: np.ndarray, y_old: np.ndarray, dt: float, alpha: float = 2.0) -> float:
    """(sum_k dt * max_j |y_new - y_old|^alpha)^(1/alpha) over the rows given."""
    gap = np.abs(np.asarray(y_new, dtype=float) - np.asarray(y_old, dtype=float))
    if gap.ndim == 1:
        gap = gap[None, :]
    return float(np.sum(dt * np.max(gap, axis=1) ** alpha) ** (1.0 / alpha))


def solve_bsvie_no_y(spec: ProblemSpec, field_anchors: Optional[Sequence[int]] = None) -> SolutionBundle:
    if spec.gen.depends_on_y:
        raise ValueError("generator depends on y; use solve_bsvie")
    res = backward_sweep(spec, 0, spec.tgrid.n_t, field_anchors=field_anchors)
    return SolutionBundle(spec=spec, Y=res.diag, Z=res.Z, sig_star=res.sig, diagnostics={"method": "diagonal"})


def picard_sweep(
    spec: ProblemSpec,
    lo: int,
    hi: int,
    y_frozen: np.ndarray,
    y_prev: np.ndarray,
    field_anchors: Optional[Sequence[int]] = None,
    store_fields: bool = False,
):
    """One Picard iterate on anchors ``lo..hi``.

    ``y_frozen`` is a full ``(n_t+1, n_x)`` array; only rows ``> hi`` are read.
    ``y_prev`` holds the previous iterate on rows ``lo..hi``. Returns the
    sweep result; its ``diag`` is the new iterate on ``lo..hi``.
    """
    y_comb = np.zeros((spec.tgrid.n_t + 1, spec.xgrid.n_x))
    y_comb[hi + 1 :] = y_frozen[hi + 1 :]
    y_comb[lo : hi + 1] = y_prev
    return backward_sweep(
        spec, lo, hi, y_field=y_comb, field_anchors=field_anchors, store_fields=store_fields
    )


def _steps_for(delta: float, dt: float) -> int:
    return int(math.floor(delta / dt + 1e-9))


def solve_bsvie(
    spec: ProblemSpec,
    field_anchors: Optional[Sequence[int]] = None,
    init: Optional[np.ndarray] = None,
    on_iterate: Optional[Callable] = None,
    on_accept: Optional[Callable] = None,
) -> SolutionBundle:
    """Solve the G-BSVIE on the whole grid.

    ``init`` overrides the zero starting iterate on every interval (a full
    ``(n_t+1, n_x)`` array). ``on_iterate(lo, hi, n, y_new, y_prev)`` and
    ``on_accept(lo, hi, Y)`` are observation hooks.
    """
    if not spec.gen.depends_on_y:
        bundle = solve_bsvie_no_y(spec, field_anchors=field_anchors)
        bundle.diagnostics["plan"] = None
        return bundle

    n_t, n_x = spec.tgrid.n_t, spec.xgrid.n_x
    dt = spec.tgrid.dt
    pc = spec.picard
    d = _steps_for(spec.delta, dt)
    if d < 1:
        raise NonContraction(f"delta_init={spec.delta:g} is below one time step dt={dt:g}")

    Y = np.zeros((n_t + 1, n_x))
    Z = TriangularField(n_t, n_x)
    sig = TriangularField(n_t, n_x)
    plan = IntervalPlan(dt=dt)
    hi = n_t
    restarts = 0
    while hi >= 0:
        lo = max(0, hi - d + 1)
        if lo == 1:
            lo = 0  # the last interval is closed at 0
        lg = IntervalLog(lo, hi, restarts=restarts)
        y_prev = np.zeros((hi - lo + 1, n_x)) if init is None else np.array(init[lo : hi + 1], dtype=float)
        strikes = 0
        restart = False
        res = None
        for n in range(1, pc.max_iter + 1):
            res = picard_sweep(spec, lo, hi, Y, y_prev, field_anchors=field_anchors, store_fields=True)
            r = residual_norm(res.diag, y_prev, dt, spec.alpha)
            if on_iterate is not None:
                on_iterate(lo, hi, n, res.diag, y_prev)
            lg.residuals.append(r)
            if n >= 2:
                prev = lg.residuals[-2]
                ratio = r / prev if prev > 0 else 0.0
                lg.ratios.append(ratio)
                strikes = strikes + 1 if ratio > pc.theta else 0
            y_prev = res.diag
            if r <= pc.tol:
                lg.converged = True
                break
            if strikes >= 2:
                restart = True
                break
        if restart:
            d //= 2
            restarts += 1
            log.info("non-contraction on [%d, %d]; halving interval to %d steps", lo, hi, d)
            if d < 1:
                raise NonContraction(f"interval length fell below dt on [{lo}, {hi}]")
            continue
        if not lg.converged:
            log.warning("Picard did not reach tol=%g on [%d, %d] after %d iterates", pc.tol, lo, hi, pc.max_iter)
        Y[lo : hi + 1] = y_prev
        Z.update(res.Z)
        sig.update(res.sig)
        plan.logs.append(lg)
        if on_accept is not None:
            on_accept(lo, hi, Y)
        hi = lo - 1

    return SolutionBundle(
        spec=spec,
        Y=Y,
        Z=Z,
        sig_star=sig,
        diagnostics={"method": "picard", "plan": plan.to_dict()},
    )

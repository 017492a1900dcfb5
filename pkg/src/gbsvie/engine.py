"""Explicit monotone backward scheme for the sublinear expectation and the
parameterized G-BSDE family.

For a fixed anchor ``t_i`` the value ``u(t_k, x)`` solves, backward from
``u(T, x) = Phi(t_i, x)``,

    u_k = u_{k+1} + dt * ( G(D2 u_{k+1}) + F(t_i, s_{k+1}, x, y, D1 u_{k+1}) )

with ``G(a) = (sigma_hi^2 a^+ - sigma_lo^2 a^-) / 2``. ``y`` is either a
supplied surface (Picard iterates) or ``u`` itself. On the two boundary
columns D2 is set to 0 and the generator sees ``z = 0``. The scheme is
monotone when ``sigma_hi^2 dt / dx^2 <= 1`` and the z-sensitivity of F is
small against ``sigma_lo^2 / dx``; a coarse step can be split into
``spec.substeps`` explicit sub-steps to meet the first bound.

All anchors of a contiguous range are advanced together as rows of one
array, which is where almost all of the speed comes from.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .expr import parse_expression
from .model import (
    GeneratorSpec,
    ProblemSpec,
    SpaceGrid,
    TerminalFamily,
    TimeGrid,
    TriangularField,
    ValueSurface,
    VolatilityBand,
    auto_substeps,
)


class SolverError(RuntimeError):
    """Non-finite values in a backward step (blow-up or CFL breach)."""


def g_function(a, band: VolatilityBand):
    a = np.asarray(a, dtype=float)
    return 0.5 * (band.var_hi * np.maximum(a, 0.0) - band.var_lo * np.maximum(-a, 0.0))


def second_difference(u: np.ndarray, dx: float) -> np.ndarray:
    """3-point second difference along the last axis; zero at both boundary columns."""
    d2 = np.zeros_like(u)
    d2[..., 1:-1] = (u[..., 2:] - 2.0 * u[..., 1:-1] + u[..., :-2]) / (dx * dx)
    return d2


def first_difference(u: np.ndarray, dx: float) -> np.ndarray:
    """Central difference inside, one-sided at the two boundary columns."""
    d1 = np.empty_like(u)
    d1[..., 1:-1] = (u[..., 2:] - u[..., :-2]) / (2.0 * dx)
    d1[..., 0] = (u[..., 1] - u[..., 0]) / dx
    d1[..., -1] = (u[..., -1] - u[..., -2]) / dx
    return d1


def source_gradient(u: np.ndarray, dx: float) -> np.ndarray:
    """Gradient handed to the generator: central inside, zero on the boundary columns.

    A one-sided difference at the edge gives the inner neighbour a negative
    weight whenever F increases in z, which breaks monotonicity of the
    scheme (and with it the discrete comparison principle).
    """
    d1 = np.zeros_like(u)
    d1[..., 1:-1] = (u[..., 2:] - u[..., :-2]) / (2.0 * dx)
    return d1


@dataclass
class StepResult:
    u_row: np.ndarray
    grad_row: np.ndarray
    sig_row: np.ndarray


def step_backward(
    u_next: np.ndarray,
    source: Optional[Callable],
    band: VolatilityBand,
    dt: float,
    xgrid: SpaceGrid,
) -> StepResult:
    """One explicit step. ``source(x, u, z)`` may be None for a zero source."""
    dx = xgrid.dx
    d2 = second_difference(u_next, dx)
    incr = g_function(d2, band)
    if source is not None:
        incr = incr + source(xgrid.nodes, u_next, source_gradient(u_next, dx))
    u = u_next + dt * incr
    if not np.all(np.isfinite(u)):
        raise SolverError("non-finite value in backward step")
    sig = np.where(d2 >= 0.0, band.sigma_hi, band.sigma_lo)
    return StepResult(u, first_difference(u, dx), sig)


@dataclass
class SweepResult:
    lo: int
    hi: int
    diag: np.ndarray  # (hi - lo + 1, n_x): u^i(t_i, .) for anchors lo..hi
    Z: Optional[TriangularField]
    sig: Optional[TriangularField]
    surfaces: dict  # anchor -> ValueSurface, only for requested anchors


def backward_sweep(
    spec: ProblemSpec,
    lo: int,
    hi: int,
    y_field: Optional[np.ndarray] = None,
    field_anchors: Optional[Sequence[int]] = None,
    surface_anchors: Sequence[int] = (),
    store_fields: bool = True,
) -> SweepResult:
    """Solve the parameterized G-BSDEs for anchors ``lo..hi`` at once.

    ``y_field`` (shape ``(n_t+1, n_x)``) supplies ``Y(s_k, x)`` to the
    generator; when it is None the generator sees each anchor's own value.
    Z and optimizer fields are stored for ``field_anchors`` (default: all).
    """
    n_t = spec.tgrid.n_t
    if not 0 <= lo <= hi <= n_t:
        raise ValueError(f"bad anchor range [{lo}, {hi}]")
    t = spec.tgrid.times
    x = spec.xgrid.nodes
    dx = spec.xgrid.dx
    band = spec.band
    m = spec.substeps
    h = spec.tgrid.dt / m
    gen = spec.gen
    uses_y = gen.depends_on_y
    const_gen = not gen.expr.variables and float(gen(0, 0, 0, 0, 0)) == 0.0

    anchors = np.arange(lo, hi + 1)
    A = anchors.size
    ta = t[lo : hi + 1][:, None]
    U = np.array(np.broadcast_to(spec.terminal(ta, x[None, :]), (A, x.size)), dtype=float)
    if not np.all(np.isfinite(U)):
        raise SolverError("terminal family is non-finite on the grid")
    diag = np.empty((A, x.size))

    if store_fields:
        if field_anchors is None:
            st_anchor = anchors
        else:
            st_anchor = np.array(sorted(set(int(i) for i in field_anchors) & set(anchors.tolist())), dtype=int)
        st_rows = st_anchor - lo
        lengths = n_t + 1 - st_anchor
        st_off = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(int)
        z_pack = np.empty((int(lengths.sum()), x.size))
        s_pack = np.empty_like(z_pack)
    surf_rows = {int(i): [] for i in surface_anchors}
    surf_grad = {int(i): [] for i in surface_anchors}
    surf_sig = {int(i): [] for i in surface_anchors}

    def record(k, Ua, zcol, sigcol):
        n_act = Ua.shape[0]
        if store_fields and st_anchor.size:
            n = int(np.searchsorted(st_anchor, lo + n_act))  # stored anchors <= k
            if n:
                idx = st_off[:n] + (k - st_anchor[:n])
                z_pack[idx] = zcol[st_rows[:n]]
                s_pack[idx] = sigcol[st_rows[:n]]
        for i in surf_rows:
            if i - lo < n_act:
                surf_rows[i].append(Ua[i - lo].copy())
                surf_grad[i].append(zcol[i - lo])
                surf_sig[i].append(sigcol[i - lo])

    # terminal row k = n_t
    d2 = second_difference(U, dx)
    record(n_t, U, first_difference(U, dx), np.where(d2 >= 0.0, band.sigma_hi, band.sigma_lo))
    if hi == n_t:
        diag[n_t - lo] = U[n_t - lo]

    for k in range(n_t - 1, lo - 1, -1):
        n_act = min(hi, k) - lo + 1
        Ua = U[:n_act]
        s = t[k + 1]
        for _ in range(m):
            d2 = second_difference(Ua, dx)
            incr = g_function(d2, band)
            if not const_gen:
                z = source_gradient(Ua, dx)
                if y_field is not None:
                    y = y_field[k + 1][None, :]
                elif uses_y:
                    y = Ua
                else:
                    y = 0.0
                incr = incr + gen(ta[:n_act], s, x[None, :], y, z)
            Ua = Ua + h * incr
        if not np.all(np.isfinite(Ua)):
            raise SolverError(f"non-finite value in backward step at t={t[k]:g}")
        U[:n_act] = Ua
        if k <= hi:
            diag[k - lo] = Ua[k - lo]
        record(k, Ua, first_difference(Ua, dx), np.where(d2 >= 0.0, band.sigma_hi, band.sigma_lo))

    Z = sig = None
    if store_fields:
        Z = TriangularField.from_packed(st_anchor, st_off, z_pack, n_t)
        sig = TriangularField.from_packed(st_anchor, st_off, s_pack, n_t)
    surfaces = {}
    for i in surf_rows:
        # rows were appended from k = n_t down to k = i
        surfaces[i] = ValueSurface(
            t_index=i,
            u=np.array(surf_rows[i][::-1]),
            grad=np.array(surf_grad[i][::-1]),
            sig=np.array(surf_sig[i][::-1]),
        )
    return SweepResult(lo, hi, diag, Z, sig, surfaces)


def solve_gbsde(t_index: int, spec: ProblemSpec, y_source: Optional[np.ndarray] = None) -> ValueSurface:
    """Value surface of the parameterized G-BSDE anchored at ``t_index``.

    ``y_source`` is a ``(n_t+1, n_x)`` array read at rows ``k > t_index``.
    """
    res = backward_sweep(spec, t_index, t_index, y_field=y_source, surface_anchors=[t_index], store_fields=False)
    return res.surfaces[t_index]


def g_expectation(
    payoff,
    band: VolatilityBand,
    tgrid: TimeGrid,
    xgrid: SpaceGrid,
    substeps: int | str = "auto",
    x0: float = 0.0,
) -> float:
    """Sublinear expectation of ``payoff(x0 + B_T)`` by the backward scheme."""
    if isinstance(payoff, str):
        payoff = parse_expression(payoff)
    if substeps == "auto":
        substeps = auto_substeps(band, tgrid, xgrid)
    spec = ProblemSpec(
        band=band,
        tgrid=tgrid,
        xgrid=xgrid,
        gen=GeneratorSpec("0"),
        terminal=TerminalFamily(payoff),
        substeps=int(substeps),
    )
    res = backward_sweep(spec, 0, 0, store_fields=False)
    return float(np.interp(x0, xgrid.nodes, res.diag[0]))

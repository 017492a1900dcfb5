"""Volatility-controlled Monte Carlo.

Every fixed control picks one measure of the family behind the sublinear
expectation, so sample means under any control are lower estimates of it.
Paths also carry their realized quadratic variation, which is what the
pathwise reconstruction of the decreasing G-martingale ``K`` needs.

Increments default to symmetric +-1 (Rademacher) shocks scaled by
``sigma * sqrt(dt)``: then ``dB_k^2 == d<B>_k`` exactly on every path and the
discrete Ito identity behind the K reconstruction holds without a
``sum (dB^2 - d<B>)`` residue. Gaussian shocks are available as an option.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .engine import solve_gbsde
from .expr import parse_expression
from .model import KSample, PathBatch, ProblemSpec, SolutionBundle, ValidationError, VolControl


def simulate_paths(
    control: VolControl,
    spec: ProblemSpec,
    n_paths: int,
    seed: int,
    increments: str = "rademacher",
    x0: float = 0.0,
) -> PathBatch:
    control.validate(spec.band)
    n_t = spec.tgrid.n_t
    dt = spec.tgrid.dt
    if control.kind == "piecewise" and len(control.schedule) != n_t:
        raise ValidationError(f"control schedule has {len(control.schedule)} entries, expected {n_t}")
    rng = np.random.default_rng(seed)
    if increments == "rademacher":
        shocks = rng.integers(0, 2, size=(n_paths, n_t)).astype(float) * 2.0 - 1.0
    elif increments == "gaussian":
        shocks = rng.standard_normal((n_paths, n_t))
    else:
        raise ValueError(f"unknown increment law {increments!r}")
    sq = np.sqrt(dt)
    if control.kind == "piecewise":
        sigma = np.broadcast_to(np.asarray(control.schedule)[None, :], (n_paths, n_t))
    else:
        sigma = np.empty((n_paths, n_t))
        x = np.full(n_paths, float(x0))
        for k in range(n_t):
            sigma[:, k] = control.sigma_at(k, x)
            x = x + sigma[:, k] * sq * shocks[:, k]
    dB = sigma * sq * shocks
    qv = sigma * sigma * dt
    return PathBatch(
        seed=seed, n_paths=n_paths, dB=dB, quad_var=np.array(qv), control=control, dt=dt, x0=x0, increments=increments
    )


@dataclass
class MCEstimate:
    value: float
    stderr: float
    best: str
    by_control: dict = field(default_factory=dict)  # label -> (mean, stderr)


def mc_lower_bound(payoff, batches: Sequence[PathBatch]) -> MCEstimate:
    """Max over controls of the sample mean of ``payoff(X_T)``."""
    if not batches:
        raise ValueError("mc_lower_bound needs at least one control")
    if isinstance(payoff, str):
        payoff = parse_expression(payoff)
    by = {}
    for b in batches:
        xT = b.x0 + b.dB.sum(axis=1)
        v = np.broadcast_to(payoff.evaluate({"x": xT, "t": b.dt * b.dB.shape[1]}), xT.shape)
        by[b.control.label or f"batch{len(by)}"] = (float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size)))
    best = max(by, key=lambda k: by[k][0])
    return MCEstimate(by[best][0], by[best][1], best, by)


def _interp_rows(xq: np.ndarray, grid: np.ndarray, row: np.ndarray) -> np.ndarray:
    return np.interp(xq, grid, row)


def reconstruct_k_batch(bundle: SolutionBundle, batch: PathBatch, t_index: int) -> np.ndarray:
    """K(t_i, T) on every path of ``batch``.

    K = Phi(t_i, X_T) + sum_{k>=i} F(t_i, s_k, X_k, Y(s_k, X_k), Z_ik) dt
        - sum_{k>=i} Z_ik dB_k - Y(t_i, X_i),
    with Y and Z read off the grid by linear interpolation in x.
    """
    spec = bundle.spec
    n_t = spec.tgrid.n_t
    if not 0 <= t_index <= n_t:
        raise IndexError(f"t_index {t_index} out of range [0, {n_t}]")
    if t_index not in bundle.Z:
        raise KeyError(f"Z not stored for anchor {t_index}")
    t = spec.tgrid.times
    xg = spec.xgrid.nodes
    dt = spec.tgrid.dt
    X = batch.X
    ti = t[t_index]
    zslice = bundle.Z.anchor(t_index)
    K = np.asarray(spec.terminal(ti, X[:, n_t]), dtype=float) * np.ones(batch.n_paths)
    K = K - _interp_rows(X[:, t_index], xg, bundle.Y[t_index])
    gen = spec.gen
    zero_gen = not gen.expr.variables and float(gen(0, 0, 0, 0, 0)) == 0.0
    for k in range(t_index, n_t):
        xk = X[:, k]
        zk = _interp_rows(xk, xg, zslice[k - t_index])
        if not zero_gen:
            yk = _interp_rows(xk, xg, bundle.Y[k]) if gen.depends_on_y else 0.0
            K = K + dt * gen(ti, t[k], xk, yk, zk)
        K = K - zk * batch.dB[:, k]
    return K


def reconstruct_k(bundle: SolutionBundle, batch: PathBatch, path: int, t_index: int) -> KSample:
    sub = PathBatch(
        seed=batch.seed,
        n_paths=1,
        dB=batch.dB[path : path + 1],
        quad_var=batch.quad_var[path : path + 1],
        control=batch.control,
        dt=batch.dt,
        x0=batch.x0,
        increments=batch.increments,
    )
    return KSample(t_index, path, float(reconstruct_k_batch(bundle, sub, t_index)[0]))


def k_samples(bundle: SolutionBundle, batch: PathBatch, anchors: Sequence[int]) -> list[KSample]:
    out = []
    for i in anchors:
        vals = reconstruct_k_batch(bundle, batch, i)
        out.extend(KSample(int(i), p, float(v)) for p, v in enumerate(vals))
    return out


def bdg_diagnostic(xi, p: float, batches: Sequence[PathBatch], xgrid=None) -> dict:
    """Empirical sides of the Burkholder-Davis-Gundy sandwich for each control.

    ``xi`` is a constant, or a ``(n_t, n_x)`` / ``(n_t+1, n_x)`` grid field
    read along the path by linear interpolation (requires ``xgrid``).
    Only positivity and finiteness are asserted; the constants are unknown.
    """
    if not p > 0:
        raise ValueError("p must be > 0")
    report = {}
    for b in batches:
        n_t = b.dB.shape[1]
        if np.isscalar(xi):
            integrand = np.full(b.dB.shape, float(xi))
        else:
            field_ = np.asarray(xi, dtype=float)
            X = b.X
            nodes = xgrid.nodes
            integrand = np.column_stack([np.interp(X[:, k], nodes, field_[k]) for k in range(n_t)])
        I = np.cumsum(integrand * b.dB, axis=1)
        sup_p = np.max(np.abs(I), axis=1) ** p
        qv_p = np.sum(integrand ** 2 * b.dt, axis=1) ** (p / 2)
        m_sup, m_qv = float(sup_p.mean()), float(qv_p.mean())
        ratio = m_sup / m_qv if m_qv > 0 else 0.0
        ok = np.isfinite(m_sup) and np.isfinite(m_qv) and m_sup >= 0 and m_qv >= 0
        report[b.control.label] = {
            "sup_moment": m_sup,
            "sup_moment_stderr": float(sup_p.std(ddof=1) / np.sqrt(sup_p.size)),
            "qv_moment": m_qv,
            "ratio": ratio,
            "ok": bool(ok),
        }
    return report


def export_batch_csv(batch: PathBatch, path, bundle: SolutionBundle | None = None, max_paths: int | None = None):
    """Write per-path rows ``path,k,dB,dQV,X,K`` (K is the running K(0, t_k), blank without a bundle)."""
    X = batch.X
    n_t = batch.dB.shape[1]
    n = batch.n_paths if max_paths is None else min(max_paths, batch.n_paths)
    running = None
    if bundle is not None:
        running = _running_k0(bundle, batch)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "k", "dB", "dQV", "X", "K"])
        for p in range(n):
            for k in range(n_t + 1):
                dB = batch.dB[p, k - 1] if k else 0.0
                qv = batch.quad_var[p, k - 1] if k else 0.0
                kv = "" if running is None else f"{running[p, k]:.17g}"
                w.writerow([p, k, f"{dB:.17g}", f"{qv:.17g}", f"{X[p, k]:.17g}", kv])


def _running_k0(bundle: SolutionBundle, batch: PathBatch) -> np.ndarray:
    """K(0, t_k) = u(t_k, X_k) - u(0, X_0) + sum_{l<k} (F dt - Z dB) along each path."""
    spec = bundle.spec
    surf = solve_gbsde(0, spec, y_source=bundle.Y if spec.gen.depends_on_y else None)
    xg = spec.xgrid.nodes
    t = spec.tgrid.times
    X = batch.X
    n_t = spec.tgrid.n_t
    out = np.zeros((batch.n_paths, n_t + 1))
    acc = np.zeros(batch.n_paths)
    u0 = np.interp(X[:, 0], xg, surf.u[0])
    for k in range(n_t):
        xk = X[:, k]
        zk = np.interp(xk, xg, surf.grad[k])
        yk = np.interp(xk, xg, bundle.Y[k]) if spec.gen.depends_on_y else 0.0
        acc = acc + spec.tgrid.dt * np.broadcast_to(spec.gen(0.0, t[k], xk, yk, zk), acc.shape) - zk * batch.dB[:, k]
        out[:, k + 1] = np.interp(X[:, k + 1], xg, surf.u[k + 1]) - u0 + acc
    # at T use Phi itself, as reconstruct_k_batch does
    out[:, n_t] += np.asarray(spec.terminal(0.0, X[:, n_t])) - np.interp(X[:, n_t], xg, surf.u[n_t])
    return out


__all__ = [
    "MCEstimate",
    "bdg_diagnostic",
    "export_batch_csv",
    "k_samples",
    "mc_lower_bound",
    "reconstruct_k",
    "reconstruct_k_batch",
    "simulate_paths",
]

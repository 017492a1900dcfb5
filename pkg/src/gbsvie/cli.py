"""Command line entry point.

    gbsvie solve   <spec.json> -o <dir>
    gbsvie compare <spec1.json> <spec2.json> -o <dir> [--chained]
    gbsvie verify  <spec.json> -o <dir> [--paths N --seed S]
    gbsvie sweep   <spec.json> --nt 100,200,400 -o <dir>

Exit codes: 0 ok/PASS, 1 usage, 2 validation, 3 solver, 4 verification FAIL,
5 comparison audit refused.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .bsvie import solve_bsvie
from .engine import SolverError
from .expr import ExpressionError
from .model import (
    GeneratorSpec,
    PicardConfig,
    ProblemSpec,
    SpaceGrid,
    TerminalFamily,
    TimeGrid,
    ValidationError,
    VolatilityBand,
    VolControl,
    auto_substeps,
    validate_problem,
)
from .paths import reconstruct_k_batch, simulate_paths
from .verify import AuditError, apriori_diagnostics, compare_solutions, continuity_report

log = logging.getLogger("gbsvie")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_SOLVER, EXIT_FAIL, EXIT_AUDIT = range(6)

_EXPR = {"type": "string", "minLength": 1}
PROBLEM_SCHEMA = {
    "type": "object",
    "required": ["band", "grid", "generator", "terminal"],
    "additionalProperties": False,
    "properties": {
        "band": {
            "type": "object",
            "required": ["sigma_lo", "sigma_hi"],
            "additionalProperties": False,
            "properties": {"sigma_lo": {"type": "number"}, "sigma_hi": {"type": "number"}},
        },
        "grid": {
            "type": "object",
            "required": ["T", "n_t"],
            "additionalProperties": False,
            "properties": {
                "T": {"type": "number", "exclusiveMinimum": 0},
                "n_t": {"type": "integer", "minimum": 2},
                "x_min": {"type": "number"},
                "x_max": {"type": "number"},
                "n_x": {"type": "integer", "minimum": 3},
            },
        },
        "generator": {
            "oneOf": [
                _EXPR,
                {
                    "type": "object",
                    "required": ["expr"],
                    "additionalProperties": False,
                    "properties": {"expr": _EXPR, "L": {"type": "number", "minimum": 0}},
                },
            ]
        },
        "terminal": {
            "oneOf": [
                _EXPR,
                {"type": "object", "required": ["expr"], "additionalProperties": False, "properties": {"expr": _EXPR}},
            ]
        },
        "alpha": {"type": "number", "exclusiveMinimum": 1},
        "picard": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "delta_init": {"type": "number", "exclusiveMinimum": 0},
                "theta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "max_iter": {"type": "integer", "minimum": 1},
            },
        },
        "substeps": {"oneOf": [{"type": "integer", "minimum": 1}, {"const": "auto"}]},
    },
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# problem files


def load_problem(path) -> dict:
    """Read and schema-check a problem file; returns the raw document."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: not valid JSON: {e}") from None
    try:
        jsonschema.validate(doc, PROBLEM_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ValidationError(f"{path}: schema violation at {where}: {e.message}") from None
    return doc


def spec_from_document(doc: dict) -> ProblemSpec:
    band = VolatilityBand(float(doc["band"]["sigma_lo"]), float(doc["band"]["sigma_hi"]))
    g = doc["grid"]
    tgrid = TimeGrid(float(g["T"]), int(g["n_t"]))
    if "x_min" in g or "x_max" in g:
        if not ("x_min" in g and "x_max" in g):
            raise ValidationError("grid needs both x_min and x_max, or neither")
        lo, hi = float(g["x_min"]), float(g["x_max"])
    else:
        hw = 6.0 * band.sigma_hi * math.sqrt(tgrid.horizon)
        lo, hi = -hw, hw
    if "n_x" in g:
        n_x = int(g["n_x"])
    else:
        # round the cell count down so that dx >= sigma_hi sqrt(dt), i.e. CFL <= 1,
        # and keep it even so x = 0 is a node of the default symmetric grid
        dx = band.sigma_hi * math.sqrt(tgrid.dt)
        cells = int(math.floor((hi - lo) / dx * (1 + 1e-12)))
        if hi == -lo:
            cells -= cells % 2
        n_x = max(3, cells + 1)
    xgrid = SpaceGrid(lo, hi, n_x)
    gen = doc["generator"]
    gen = {"expr": gen} if isinstance(gen, str) else gen
    term = doc["terminal"]
    term = {"expr": term} if isinstance(term, str) else term
    picard = PicardConfig(**doc.get("picard", {}))
    sub = doc.get("substeps", 1)
    if sub == "auto":
        sub = auto_substeps(band, tgrid, xgrid)
    return ProblemSpec(
        band=band,
        tgrid=tgrid,
        xgrid=xgrid,
        gen=GeneratorSpec(gen["expr"], float(gen.get("L", 0.0))),
        terminal=TerminalFamily(term["expr"]),
        alpha=float(doc.get("alpha", 2.0)),
        picard=picard,
        substeps=int(sub),
    )


def parse_problem(path, probe_seed: int = 0):
    """Load, schema-check and validate a problem file.

    Returns ``(spec, report)``; hard validation errors raise.
    """
    spec = spec_from_document(load_problem(path))
    report = validate_problem(spec, seed=probe_seed)
    return spec, report


def spec_to_dict(spec: ProblemSpec) -> dict:
    return {
        "band": {"sigma_lo": spec.band.sigma_lo, "sigma_hi": spec.band.sigma_hi},
        "grid": {
            "T": spec.tgrid.horizon,
            "n_t": spec.tgrid.n_t,
            "x_min": spec.xgrid.x_min,
            "x_max": spec.xgrid.x_max,
            "n_x": spec.xgrid.n_x,
        },
        "generator": {"expr": str(spec.gen.expr), "L": spec.gen.lipschitz},
        "terminal": {"expr": str(spec.terminal.expr)},
        "alpha": spec.alpha,
        "picard": {
            "delta_init": spec.delta,
            "theta": spec.picard.theta,
            "tol": spec.picard.tol,
            "max_iter": spec.picard.max_iter,
        },
        "substeps": spec.substeps,
    }


def spec_hash(spec: ProblemSpec) -> str:
    blob = json.dumps(spec_to_dict(spec), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


# --------------------------------------------------------------------------
# artifacts


def _write_csv(path: Path, header: str, cols) -> None:
    arr = np.column_stack(cols) if cols[0].size else np.empty((0, len(cols)))
    with open(path, "w") as fh:
        np.savetxt(fh, arr, fmt="%.17g", delimiter=",", header=header, comments="")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not serializable: {type(o)}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _field_rows(field, spec: ProblemSpec):
    t = spec.tgrid.times
    x = spec.xgrid.nodes
    ts, ss, xs, vs = [], [], [], []
    for i in field.anchors:
        a = field.anchor(i)
        ks = np.arange(i, spec.tgrid.n_t + 1)
        ts.append(np.full(a.size, t[i]))
        ss.append(np.repeat(t[ks], x.size))
        xs.append(np.tile(x, ks.size))
        vs.append(a.ravel())
    if not ts:
        return [np.empty(0)] * 4
    return [np.concatenate(c) for c in (ts, ss, xs, vs)]


def default_anchor_stride(n_t: int, max_anchors: int = 51) -> int:
    return max(1, int(math.ceil((n_t + 1) / max_anchors)))


def _threads() -> str | None:
    return os.environ.get("GBSVIE_THREADS")


def _manifest(spec, seeds: dict, plan, started: float, outputs: list[Path], extra: dict | None = None) -> dict:
    m = {
        "spec_hash": spec_hash(spec),
        "spec": spec_to_dict(spec),
        "grid": {
            "dt": spec.tgrid.dt,
            "dx": spec.xgrid.dx,
            "cfl": spec.band.var_hi * spec.tgrid.dt / spec.xgrid.dx ** 2,
            "substeps": spec.substeps,
        },
        "seeds": seeds,
        "versions": {"gbsvie": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "threads": _threads(),
        "interval_plan": plan,
        "wall_clock_s": time.perf_counter() - started,
        "outputs": {p.name: _sha256(p) for p in outputs},
    }
    if extra:
        m.update(extra)
    return m


# --------------------------------------------------------------------------
# commands


def cmd_solve(spec_file, out, paths: int = 100, seed: int = 0, probe_seed: int = 0, anchor_stride: int | None = None) -> int:
    started = time.perf_counter()
    spec, report = parse_problem(spec_file, probe_seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    n_t = spec.tgrid.n_t
    stride = anchor_stride or default_anchor_stride(n_t)
    anchors = sorted(set(range(0, n_t + 1, stride)) | {n_t})
    bundle = solve_bsvie(spec, field_anchors=anchors)

    t = spec.tgrid.times
    x = spec.xgrid.nodes
    files = []
    p = out / "y_surface.csv"
    _write_csv(p, "t,x,y", [np.repeat(t, x.size), np.tile(x, n_t + 1), bundle.Y.ravel()])
    files.append(p)
    p = out / "z_field.csv"
    _write_csv(p, "t,s,x,z", _field_rows(bundle.Z, spec))
    files.append(p)
    p = out / "sig_star.csv"
    _write_csv(p, "t,s,x,sigma", _field_rows(bundle.sig_star, spec))
    files.append(p)

    batch = simulate_paths(VolControl.feedback(bundle.sig_star, spec.xgrid, 0), spec, paths, seed)
    kt, kp, kv = [], [], []
    for i in anchors:
        vals = reconstruct_k_batch(bundle, batch, i)
        kt.append(np.full(paths, t[i]))
        kp.append(np.arange(paths, dtype=float))
        kv.append(vals)
    p = out / "k_samples.csv"
    _write_csv(p, "t,path,k", [np.concatenate(kt), np.concatenate(kp), np.concatenate(kv)])
    files.append(p)

    plan = bundle.diagnostics.get("plan")
    diag = {
        "validation": report.to_dict(),
        "solver": {"method": bundle.diagnostics.get("method"), "plan": plan},
        "field_anchors": anchors,
        "k_summary": {"max": float(np.max(np.concatenate(kv))), "mean": float(np.mean(np.concatenate(kv)))},
    }
    p = out / "diagnostics.json"
    _write_json(p, diag)
    files.append(p)
    man = _manifest(
        spec,
        {"probe": probe_seed, "paths": seed},
        plan,
        started,
        files,
        {"n_paths": paths, "anchor_stride": stride, "command": "solve"},
    )
    _write_json(out / "manifest.json", man)
    print(f"Y(0, x=0) = {float(np.interp(0.0, x, bundle.Y[0])):.10g}; wrote {len(files) + 1} files to {out}")
    return EXIT_OK


def cmd_compare(spec1_file, spec2_file, out, chained: bool = False, cmp_tol: float = 1e-6) -> int:
    started = time.perf_counter()
    s1, _ = parse_problem(spec1_file)
    s2, _ = parse_problem(spec2_file)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        rep = compare_solutions(s1, s2, chained=chained, cmp_tol=cmp_tol)
    except AuditError as e:
        _write_json(out / "comparison.json", {"verdict": "REFUSED", "reason": str(e)})
        print(f"audit refused: {e}", file=sys.stderr)
        return EXIT_AUDIT
    p = out / "comparison.json"
    _write_json(p, rep.to_dict())
    _write_json(
        out / "manifest.json",
        _manifest(s1, {}, None, started, [p], {"spec2_hash": spec_hash(s2), "command": "compare"}),
    )
    verdict = "PASS" if rep.passed else "FAIL"
    print(f"{verdict}: min(Y1 - Y2) = {rep.min_gap:.6g} (tol {cmp_tol:g})")
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_verify(spec_file, out, paths: int = 1000, seed: int = 0, probe_seed: int = 0) -> int:
    started = time.perf_counter()
    spec, report = parse_problem(spec_file, probe_seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    bundle = solve_bsvie(spec)
    apr = apriori_diagnostics(bundle, spec)
    cont = continuity_report(bundle, n_paths=paths, seed=seed)
    files = []
    for name, obj in (("assumptions.json", report.to_dict()), ("apriori.json", apr), ("continuity.json", cont)):
        p = out / name
        _write_json(p, obj)
        files.append(p)
    ok = apr["finite"] and all(cont["monotone_in_h"].values())
    _write_json(
        out / "manifest.json",
        _manifest(spec, {"probe": probe_seed, "paths": seed}, bundle.diagnostics.get("plan"), started, files, {"command": "verify", "verdict": "PASS" if ok else "FAIL"}),
    )
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(("PASS" if ok else "FAIL") + f": a priori ratios finite={apr['finite']}, moduli monotone={cont['monotone_in_h']}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_sweep(spec_file, nts, out, reference: float | None = None, x0: float = 0.0) -> int:
    started = time.perf_counter()
    doc = load_problem(spec_file)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for n_t in nts:
        d = json.loads(json.dumps(doc))
        d["grid"]["n_t"] = int(n_t)
        spec = spec_from_document(d)
        spec = replace(spec, substeps=max(spec.substeps, auto_substeps(spec.band, spec.tgrid, spec.xgrid)))
        validate_problem(spec)
        t0 = time.perf_counter()
        b = solve_bsvie(spec, field_anchors=[])
        y0 = float(np.interp(x0, spec.xgrid.nodes, b.Y[0]))
        rows.append(
            {
                "n_t": spec.tgrid.n_t,
                "n_x": spec.xgrid.n_x,
                "dt": spec.tgrid.dt,
                "dx": spec.xgrid.dx,
                "substeps": spec.substeps,
                "y0": y0,
                "seconds": time.perf_counter() - t0,
            }
        )
    ref = reference if reference is not None else rows[-1]["y0"]
    for r in rows:
        r["error"] = abs(r["y0"] - ref)
    p = out / "sweep.csv"
    cols = ["n_t", "n_x", "dt", "dx", "substeps", "y0", "error", "seconds"]
    with open(p, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(f"{r[c]:.17g}" if isinstance(r[c], float) else str(r[c]) for c in cols) + "\n")
    _write_json(
        out / "manifest.json",
        _manifest(spec, {}, None, started, [p], {"command": "sweep", "reference": ref, "reference_given": reference is not None}),
    )
    for r in rows:
        print(f"n_t={r['n_t']:5d}  y0={r['y0']:.12g}  error={r['error']:.3e}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="gbsvie", description="Solve and check G-BSVIEs on a lattice.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("solve", help="solve a problem file and write artifacts")
    s.add_argument("spec")
    s.add_argument("-o", "--out", required=True)
    s.add_argument("--paths", type=int, default=100, help="paths for K samples")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--probe-seed", type=int, default=0)
    s.add_argument("--anchor-stride", type=int, default=None, help="store Z/sigma*/K every N anchors")

    c = sub.add_parser("compare", help="comparison check for an ordered pair")
    c.add_argument("spec1")
    c.add_argument("spec2")
    c.add_argument("-o", "--out", required=True)
    c.add_argument("--chained", action="store_true", help="seed Picard iterates at the other solution")
    c.add_argument("--tol", type=float, default=1e-6)

    v = sub.add_parser("verify", help="assumption, a priori and continuity reports")
    v.add_argument("spec")
    v.add_argument("-o", "--out", required=True)
    v.add_argument("--paths", type=int, default=1000)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--probe-seed", type=int, default=0)

    w = sub.add_parser("sweep", help="convergence table over time grids")
    w.add_argument("spec")
    w.add_argument("--nt", required=True, help="comma separated list, e.g. 100,200,400")
    w.add_argument("-o", "--out", required=True)
    w.add_argument("--reference", type=float, default=None, help="exact value at (0, x0); default: finest run")
    w.add_argument("--x0", type=float, default=0.0)
    return ap


def _parse_nt(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--nt expects integers, got {text!r}") from None
    if not vals or any(v < 2 for v in vals):
        raise UsageError("--nt needs at least one value >= 2")
    return vals


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "solve":
            return cmd_solve(args.spec, args.out, args.paths, args.seed, args.probe_seed, args.anchor_stride)
        if args.command == "compare":
            return cmd_compare(args.spec1, args.spec2, args.out, args.chained, args.tol)
        if args.command == "verify":
            return cmd_verify(args.spec, args.out, args.paths, args.seed, args.probe_seed)
        return cmd_sweep(args.spec, _parse_nt(args.nt), args.out, args.reference, args.x0)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, ExpressionError) as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except SolverError as e:
        print(f"solver error: {e}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

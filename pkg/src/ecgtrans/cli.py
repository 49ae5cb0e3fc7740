"""Command-line front end: ``ecgtrans <subcommand> [options]``.

Exit codes: 0 success, 1 input error, 2 solver or compatibility failure.
Every run writes ``summary.txt`` (``key = value`` lines) into ``--out``,
including failed runs.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .boundary import CTOL, EPS_KER, compatibility_defect, kernel_basis, neumann_residual, solve_neumann
from .cauchy import ALTERNATING, TIKHONOV, add_noise, select_alpha_discrepancy, solve_alternating, \
    solve_tikhonov
from .convergence import FIXTURES, convergence_study, table_to_csv
from .errors import CompatibilityError, InputError, SolverError
from .fem import boundary_l2_norm, write_field_csv, write_field_vtk
from .mesh import INNER, OUTER, generate_annulus, generate_disk, load_mesh, quality_report, save_mesh
from .operators import BUILTIN_OPERATORS, builtin_operator, conormal, formal_adjoint, \
    generalized_laplacian, load_operator, strong_ellipticity_constant, symbol_injectivity_margin
from .pipeline import PipelineError, boundary_data, load_config, run

log = logging.getLogger("ecgtrans")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(message)


def _operator(spec):
    path = Path(spec)
    if path.is_file():
        return load_operator(path)
    if spec in BUILTIN_OPERATORS:
        return builtin_operator(spec)
    raise InputError(f"operator {spec!r} is neither a file nor one of {sorted(BUILTIN_OPERATORS)}")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating, np.integer)):
        return repr(v.item())
    return str(v)


def write_summary(path, values):
    lines = [f"{k} = {_fmt(v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def _write_table(path, rows, header):
    out = [",".join(header)]
    for r in rows:
        out.append(",".join(_fmt(x) for x in r))
    Path(path).write_text("\n".join(out) + "\n")


def _emit(field, out, name):
    write_field_csv(field, out / f"{name}.csv")
    write_field_vtk(field, out / f"{name}.vtk", name)


# --- descriptions for symbol-check ------------------------------------------

def describe_first_order(op):
    """Short human-readable name for common operator shapes, else coefficient dump."""
    n, l, k = op.n, op.l, op.k
    a, a0 = op.a, op.a0
    eye = np.eye(n)
    if l == 1 and k >= n and np.array_equal(a[:, 0, :n], -eye) and not np.any(a[:, 0, n:]):
        rest = a0[0]
        if not np.any(rest[:n]):
            if k == n and not np.any(rest):
                return "-div"
            return "(-div, " + ", ".join(_fmt_c(x) for x in rest[n:]) + ")"
    if k == 1 and l >= n and np.array_equal(a[:, :n, 0], eye) and not np.any(a[:, n:, 0]) \
            and not np.any(a0[:n]):
        if l == n:
            return "grad"
        return "(grad; " + ", ".join(_fmt_c(x) for x in a0[n:, 0]) + ")"
    terms = []
    for i in range(l):
        row = []
        for j in range(n):
            for c in range(k):
                if a[j, i, c] != 0:
                    row.append(f"{_fmt_c(a[j, i, c])}*d{j}(u{c})")
        for c in range(k):
            if a0[i, c] != 0:
                row.append(f"{_fmt_c(a0[i, c])}*u{c}")
        terms.append(" + ".join(row) or "0")
    return "[" + "; ".join(terms) + "]"


def _fmt_c(x):
    x = complex(x)
    if x.imag == 0:
        return f"{x.real:g}"
    if x.real == 0:
        return f"{x.imag:g}i"
    return f"({x.real:g}{x.imag:+g}i)"


def describe_second_order(L):
    n, k = L.n, L.k
    P = L.principal_part()
    ref = np.zeros_like(P)
    for j in range(n):
        ref[j, j] = np.eye(k)
    for s in (1.0,):
        if np.allclose(P, s * ref, rtol=0, atol=0) and not np.any(L.b):
            c = L.c
            if not np.any(c):
                return "-Laplacian"
            if np.array_equal(c, c[0, 0] * np.eye(k)):
                return f"-Laplacian + {_fmt_c(c[0, 0])}"
            return "-Laplacian + C"
    return "second-order system"


# --- subcommands -------------------------------------------------------------

def cmd_mesh(args, out, summary):
    if args.kind == "annulus":
        mesh = generate_annulus(args.r_in, args.r_out, args.h)
    else:
        mesh = generate_disk(args.r, args.h)
    save_mesh(mesh, out / "mesh.txt")
    summary.update(quality_report(mesh))
    print(f"wrote {out / 'mesh.txt'}: {mesh.n_nodes} nodes, {len(mesh.triangles)} triangles")


def cmd_symbol_check(args, out, summary):
    op = _operator(args.operator)
    margin = symbol_injectivity_margin(op, args.samples)
    L = generalized_laplacian(op)
    c = strong_ellipticity_constant(L, args.samples)
    M, M0 = conormal(op).coefficients(np.eye(op.n)[0])
    summary.update(operator=op.name or args.operator, n=op.n, l=op.l, k=op.k, margin=margin,
                   injective=margin > 0, adjoint=describe_first_order(formal_adjoint(op)),
                   laplacian=describe_second_order(L), ellipticity_constant=c)
    print(f"operator: {summary['operator']} (n={op.n}, l={op.l}, k={op.k})")
    print(f"margin: {round(margin, 12)!r}")
    print(f"adjoint: {summary['adjoint']}")
    print(f"generalized laplacian: {summary['laplacian']}")
    print(f"strong ellipticity constant: {c:.6g}")
    print(f"conormal at nu=e0: M = {M.tolist()}, M0 = {M0.tolist()}")
    if margin <= 0:
        raise InputError("symbol is not injective on the sampled directions")


def _mesh_from_args(args, default):
    if args.mesh:
        return load_mesh(args.mesh)
    if default == "disk":
        return generate_disk(args.r_in, args.h)
    return generate_annulus(args.r_in, args.r_out, args.h)


def cmd_neumann(args, out, summary):
    op = _operator(args.operator)
    mesh = _mesh_from_args(args, "disk")
    tag = args.tag
    h0 = boundary_data(mesh, tag, args.data, op.k)
    summary.update(operator=op.name or args.operator, nodes=mesh.n_nodes, ctol=args.ctol,
                   eps_ker=args.eps_ker)
    kernel = kernel_basis(op, mesh, args.eps_ker, tag=tag)
    defect = compatibility_defect(h0, kernel)
    summary.update(kernel_dimension=kernel.dimension, defect=defect)
    h = solve_neumann(op, mesh, h0, tol=args.tol, ctol=args.ctol, kernel=kernel)
    summary.update(residual=neumann_residual(op, h, h0), h_trace_norm=boundary_l2_norm(h.trace(tag)))
    _emit(h, out, "h")
    print(f"kernel dimension {kernel.dimension}, defect {defect:.3e}, solved")


def cmd_cauchy(args, out, summary):
    op = _operator(args.operator)
    mesh = _mesh_from_args(args, "annulus")
    f = boundary_data(mesh, OUTER, args.data, op.k)
    summary.update(operator=op.name or args.operator, nodes=mesh.n_nodes, method=args.method,
                   seed=args.seed)
    delta = args.delta
    if args.noise > 0:
        f, delta = add_noise(f, args.noise, args.seed)
        summary["noise_level"] = args.noise
    table = []
    if args.method == ALTERNATING:
        sol = solve_alternating(op, mesh, f, args.max_iter, args.stop_tol)
    elif args.alpha is not None:
        sol = solve_tikhonov(op, mesh, f, args.alpha, tol=args.tol)
    elif delta:
        summary.update(delta=delta, tau=args.tau)
        try:
            _, sol, table = select_alpha_discrepancy(op, mesh, f, delta, args.tau, tol=args.tol)
        except SolverError as exc:
            rows = [(e.alpha, e.discrepancy, e.iterations) for e in getattr(exc, "table", [])]
            _write_table(out / "sweep.csv", rows, ["alpha", "discrepancy", "iterations"])
            raise
    else:
        raise InputError("Tikhonov needs --alpha, or --delta/--noise for the discrepancy sweep")
    summary.update(alpha=sol.alpha, discrepancy=sol.discrepancy, iterations=sol.iterations,
                   trace_inner_norm=boundary_l2_norm(sol.trace_inner),
                   flux_inner_norm=boundary_l2_norm(sol.flux_inner))
    _emit(sol.u_b, out, "u_b")
    _emit(sol.trace_inner, out, "trace_inner")
    _emit(sol.flux_inner, out, "flux_inner")
    if table:
        _write_table(out / "sweep.csv", [(e.alpha, e.discrepancy, e.iterations) for e in table],
                     ["alpha", "discrepancy", "iterations"])
    _write_table(out / "history.csv", list(enumerate(sol.history)), ["iteration", "value"])
    print(f"{sol.method}: alpha {sol.alpha:g}, discrepancy {sol.discrepancy:.4e}, "
          f"{sol.iterations} iterations")


def cmd_pipeline(args, out, summary):
    cfg = load_config(args.config, lam=args.lam, lam_tilde=args.lam_tilde, alpha=args.alpha,
                      seed=args.seed, h=args.h)
    try:
        report = run(cfg)
    except PipelineError as exc:
        _pipeline_outputs(exc.report, out, summary)
        summary["failed_stage"] = exc.stage
        if isinstance(exc.cause, CompatibilityError):
            summary["ctol"] = exc.cause.ctol
        raise
    _pipeline_outputs(report, out, summary)
    print(f"v on the heart surface: L2 norm {summary['v_norm']:.6g}")


def _pipeline_outputs(report, out, summary):
    summary.update(report.summary())
    if report.sweep:
        _write_table(out / "sweep.csv", [(e["alpha"], e["discrepancy"], e["iterations"]) for e in report.sweep],
                     ["alpha", "discrepancy", "iterations"])
    if report.cauchy is not None:
        _emit(report.cauchy.u_b, out, "u_b")
    if report.h0 is not None:
        _emit(report.h0, out, "h0")
    if report.h is not None:
        _emit(report.h, out, "h")
    if report.v is not None:
        _emit(report.v, out, "v")
    timings = [f"{k} = {v!r}" for k, v in report.timings.items()]
    (out / "timings.txt").write_text("\n".join(timings) + "\n")


def cmd_convergence(args, out, summary):
    rows = convergence_study(args.fixture, args.levels, args.h0)
    table_to_csv(rows, out / "convergence.csv")
    orders = [r.order for r in rows[1:]]
    summary.update(fixture=args.fixture, levels=args.levels, finest_error=rows[-1].error,
                   min_order=min(orders))
    for r in rows:
        print(f"h={r.h:<8g} nodes={r.n_nodes:<7d} error={r.error:.4e} order={r.order:.3f}")


# --- parser ------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="ecgtrans", description="Transmembrane potential reconstruction toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--out", type=Path, default=Path("."), help="output directory (created)")

    def geometry(sp, disk=False):
        sp.add_argument("--mesh", help="mesh file (overrides generation parameters)")
        sp.add_argument("--r-in", type=float, default=1.0, help="inner (heart) radius")
        if not disk:
            sp.add_argument("--r-out", type=float, default=2.0, help="outer (body) radius")
        sp.add_argument("--h", type=float, default=0.05, help="target edge length")

    m = sub.add_parser("mesh", help="generate an annulus or disk mesh")
    common(m)
    m.add_argument("--kind", choices=["annulus", "disk"], default="annulus")
    m.add_argument("--r-in", type=float, default=1.0)
    m.add_argument("--r-out", type=float, default=2.0)
    m.add_argument("--r", type=float, default=1.0, help="disk radius")
    m.add_argument("--h", type=float, default=0.05)
    m.set_defaults(func=cmd_mesh)

    s = sub.add_parser("symbol-check", help="symbol and ellipticity diagnostics of an operator")
    common(s)
    s.add_argument("operator", help="operator JSON file or builtin name")
    s.add_argument("--samples", type=int, default=64)
    s.set_defaults(func=cmd_symbol_check)

    n = sub.add_parser("neumann", help="Neumann problem with compatibility check")
    common(n)
    n.add_argument("--operator", default="gradient")
    geometry(n, disk=True)
    n.add_argument("--tag", default=INNER, help="boundary tag carrying the data")
    n.add_argument("--data", default="cos:1:1", help="zero | const:c | cos:m:amp | CSV path")
    n.add_argument("--tol", type=float, default=1e-10)
    n.add_argument("--ctol", type=float, default=CTOL)
    n.add_argument("--eps-ker", type=float, default=EPS_KER)
    n.set_defaults(func=cmd_neumann)

    c = sub.add_parser("cauchy", help="regularized Cauchy problem on the annulus")
    common(c)
    c.add_argument("--operator", default="gradient")
    geometry(c)
    c.add_argument("--data", default="cos:1:4", help="outer Dirichlet data spec")
    c.add_argument("--method", choices=[TIKHONOV, ALTERNATING], type=str.upper, default=TIKHONOV)
    c.add_argument("--alpha", type=float, help="fixed Tikhonov weight")
    c.add_argument("--delta", type=float, help="noise level for the discrepancy sweep")
    c.add_argument("--noise", type=float, default=0.0, help="relative noise added to the data")
    c.add_argument("--tau", type=float, default=1.1)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--max-iter", type=int, default=200)
    c.add_argument("--stop-tol", type=float, default=1e-8)
    c.add_argument("--tol", type=float, default=1e-10)
    c.set_defaults(func=cmd_cauchy)

    pl = sub.add_parser("pipeline", help="full three-step reconstruction from a JSON config")
    common(pl)
    pl.add_argument("config", type=Path)
    pl.add_argument("--lam", type=float)
    pl.add_argument("--lam-tilde", type=float)
    pl.add_argument("--alpha", type=float)
    pl.add_argument("--seed", type=int)
    pl.add_argument("--h", type=float)
    pl.set_defaults(func=cmd_pipeline)

    cv = sub.add_parser("convergence", help="refinement study on a closed-form fixture")
    common(cv)
    cv.add_argument("--fixture", choices=sorted(FIXTURES), default="zaremba")
    cv.add_argument("--levels", type=int, default=3)
    cv.add_argument("--h0", type=float, default=0.2)
    cv.set_defaults(func=cmd_convergence)
    return p


def _scan_out(argv):
    # best effort when parsing failed before --out was read
    argv = list(argv)
    for i, a in enumerate(argv):
        if a == "--out" and i + 1 < len(argv):
            return Path(argv[i + 1])
        if a.startswith("--out="):
            return Path(a.split("=", 1)[1])
    return Path(".")


def run_cli(argv=None):
    """Parse ``argv`` and run; returns the exit code."""
    summary = {"command": None, "status": "error"}
    out = None
    try:
        parser = build_parser()
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help / --version
            return int(exc.code or 0)
        summary["command"] = args.command
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
        t0 = time.perf_counter()
        args.func(args, out, summary)
        log.info("finished in %.2f s", time.perf_counter() - t0)
        summary["status"] = "ok"
        code = 0
    except InputError as exc:
        summary.update(error_type=type(exc).__name__, error=str(exc))
        print(f"input error: {exc}", file=sys.stderr)
        code = 1
    except (SolverError, CompatibilityError) as exc:
        cause = getattr(exc, "cause", None) or exc
        summary.update(error_type=type(cause).__name__, error=str(exc))
        if isinstance(cause, CompatibilityError):
            summary.update(defect=cause.defect, ctol=cause.ctol)
        print(f"solver error: {exc}", file=sys.stderr)
        code = 2
    except OSError as exc:
        summary.update(error_type=type(exc).__name__, error=str(exc))
        print(f"input error: {exc}", file=sys.stderr)
        code = 1
    summary["exit_code"] = code
    if out is None:
        out = _scan_out(sys.argv[1:] if argv is None else argv)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_summary(out / "summary.txt", summary)
    except OSError as exc:
        print(f"cannot write summary: {exc}", file=sys.stderr)
        code = code or 1
    return code


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()

"""Command-line front end: ``python -m dirkwso <verb> ...``.

Verbs: ``list``, ``verify``, ``stability``, ``converge``, ``search`` and
``export``.  Exit status is 0 on success, 1 when a verified property does
not match ``--expect`` (or a search yields no candidate) and 2 on usage
errors such as unknown schemes, unknown problems or malformed flags.

Numbers are printed with 17 significant digits; ``--pretty`` switches to a
shorter human-readable layout.  ``DIRKWSO_THREADS`` sets the default worker
count for ``converge`` and ``search``.
"""
from __future__ import annotations

import argparse
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import conditions, convergence, problems, search, stability, tableau, wso

EXIT_OK = 0
EXIT_MISMATCH = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Bad flags or unknown names; maps to exit status 2."""


def _num(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        return "nan"
    return f"{x:.17g}"


def _short(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.6g}"


def _complex(z, fmt) -> str:
    z = complex(z)
    if z.imag == 0.0:
        return fmt(z.real)
    return f"{fmt(z.real)}{'+' if z.imag >= 0 else '-'}{fmt(abs(z.imag))}j"


def _floats(text: str, count: int | None = None, name: str = "value") -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{name}: expected comma-separated numbers, got {text!r}") from None
    if count is not None and len(vals) != count:
        raise UsageError(f"{name}: expected {count} numbers, got {len(vals)}")
    return vals


def _ints(text: str, count: int, name: str) -> list[int]:
    vals = _floats(text, count, name)
    if any(v != int(v) for v in vals):
        raise UsageError(f"{name}: expected integers, got {text!r}")
    return [int(v) for v in vals]


def threads_default() -> int:
    raw = os.environ.get("DIRKWSO_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"DIRKWSO_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def load_scheme(name: str) -> tableau.Tableau:
    """A built-in name or a path to a tableau text file."""
    if name in tableau.builtin_names():
        return tableau.builtin(name)
    path = Path(name)
    if path.is_file():
        try:
            return tableau.from_text(path.read_text(), source=str(path))
        except ValueError as exc:
            raise UsageError(f"{path}: {exc}") from None
    raise UsageError(
        f"unknown scheme {name!r}; choose from {', '.join(tableau.builtin_names())}"
        " or give a tableau file"
    )


# --------------------------------------------------------------------------
# verbs
# --------------------------------------------------------------------------


def scheme_report(t: tableau.Tableau) -> list[tuple[str, object]]:
    """Verified properties of ``t`` as ordered ``(key, value)`` pairs."""
    rep = conditions.report(t)
    kr = wso.wso_of(t)
    st = stability.check_a_stability(t, mode="fine")
    red = tableau.reduce_confluent(t)
    p = rep.order
    max_res = max((rep.residuals_by_order[k] for k in range(1, p + 1)), default=0.0)
    return [
        ("label", t.label),
        ("source", t.source),
        ("stages", t.s),
        ("order", rep.order),
        ("stage_order", rep.stage_order),
        ("wso", kr.q),
        ("dim_Kq", kr.dim_Kq),
        ("min_poly_degree", kr.min_poly_degree),
        ("min_poly_roots", list(kr.min_poly_roots)),
        ("max_order_residual", max_res),
        ("max_orthogonality_residual", kr.orthogonality_residual),
        ("stiffly_accurate", t.stiffly_accurate),
        ("irreducible", not red.reducible),
        ("a_stable", st.a_stable),
        ("l_stable", st.l_stable),
        ("max_imag_axis_modulus", st.max_imag_axis_modulus),
        ("r_at_minus_inf", st.r_at_minus_inf),
        ("imag_axis_samples", st.sample_count),
        ("order_tol", rep.tol),
        ("wso_tol", wso.WSO_TOL),
        ("krylov_rank_tol", wso.RANK_TOL),
        ("a_stability_tol", stability.A_STAB_TOL),
        ("l_stability_tol", stability.L_STAB_TOL),
    ]


def _render(pairs, pretty: bool) -> str:
    fmt = _short if pretty else _num
    lines = []
    width = max(len(k) for k, _ in pairs) if pretty else 0
    for key, val in pairs:
        if isinstance(val, bool) or isinstance(val, str):
            text = str(val).lower() if isinstance(val, bool) else val
        elif isinstance(val, list):
            text = " ".join(_complex(v, fmt) for v in val)
        else:
            text = fmt(val)
        lines.append(f"{key:<{width}}  {text}" if pretty else f"{key}: {text}")
    return "\n".join(lines)


def cmd_list(args) -> int:
    if args.problems:
        for pid in problems.problem_ids():
            print(pid)
        return EXIT_OK
    for name in tableau.builtin_names():
        if args.pretty:
            t = tableau.builtin(name)
            print(f"{name:<22} s={t.s:<3} source={t.source}")
        else:
            print(name)
    return EXIT_OK


def cmd_verify(args) -> int:
    t = load_scheme(args.scheme)
    pairs = scheme_report(t)
    status = EXIT_OK
    if args.expect is not None:
        p, q = _ints(args.expect, 2, "--expect")
        info = dict(pairs)
        ok = info["order"] == p and info["wso"] == q
        pairs.append(("expect", f"{p},{q}"))
        pairs.append(("expect_match", ok))
        if not ok:
            status = EXIT_MISMATCH
    print(_render(pairs, args.pretty))
    return status


def cmd_stability(args) -> int:
    t = load_scheme(args.scheme)
    window = _floats(args.window, 4, "--window")
    if window[0] >= window[1] or window[2] >= window[3]:
        raise UsageError("--window needs xmin < xmax and ymin < ymax")
    nx, ny = _ints(args.resolution, 2, "--resolution")
    if nx < 2 or ny < 2:
        raise UsageError("--resolution needs at least 2 points per axis")
    curves = stability.region_boundary(t, tuple(window), (nx, ny))
    if args.out:
        Path(args.out).write_text(stability.boundary_csv(curves))
    if args.svg:
        Path(args.svg).write_text(stability.boundary_svg(curves, tuple(window)))
    st = stability.check_a_stability(t, mode="fine")
    pairs = [
        ("label", t.label),
        ("a_stable", st.a_stable),
        ("l_stable", st.l_stable),
        ("max_imag_axis_modulus", st.max_imag_axis_modulus),
        ("r_at_minus_inf", st.r_at_minus_inf),
        ("boundary_curves", len(curves)),
        ("a_stability_tol", stability.A_STAB_TOL),
        ("l_stability_tol", stability.L_STAB_TOL),
    ]
    print(_render(pairs, args.pretty))
    return EXIT_OK


def _problem(args):
    kwargs = {}
    if args.n is not None:
        kwargs["n"] = args.n
    if args.space_order is not None:
        kwargs["order"] = args.space_order
    try:
        return problems.get_problem(args.problem, **kwargs)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    except TypeError as exc:
        raise UsageError(f"problem {args.problem!r}: {exc}") from None


def _converge_one(job):
    name, args = job
    t = load_scheme(name)
    p = _problem(args)
    reference = convergence.vdp_reference() if args.problem == "van_der_pol" else None
    table = convergence.sweep(
        t,
        p,
        _floats(args.dts, name="--dts"),
        reference=reference,
        precision=args.precision,
        error_floor=args.floor,
        error_floor_ux=args.floor_ux,
    )
    for w in args.window or []:
        lo, hi = _floats(w, 2, "--window")
        try:
            convergence.fit_slope(table, (lo, hi))
        except convergence.FitError as exc:
            print(f"# {t.label}: {exc}", file=sys.stderr)
    return table


def cmd_converge(args) -> int:
    names = [s for s in args.scheme.split(",") if s]
    for name in names:
        load_scheme(name)
    prob = _problem(args)
    dts = _floats(args.dts, name="--dts")
    if not dts or any(dt <= 0 for dt in dts):
        raise UsageError("--dts needs positive step sizes")
    t0, T = prob.t_span
    for dt in dts:
        try:
            convergence.steps_for(T - t0, dt)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    for w in args.window or []:
        _floats(w, 2, "--window")
    jobs = [(name, args) for name in names]
    workers = args.workers or threads_default()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            tables = list(pool.map(_converge_one, jobs))
    else:
        tables = [_converge_one(j) for j in jobs]
    out = Path(args.out) if args.out else None
    for table in tables:
        text = convergence.to_csv(table, plotdata=args.plotdata)
        if out is None:
            sys.stdout.write(text)
            continue
        if out.suffix == ".csv" and len(tables) == 1:
            path = out
        else:
            out.mkdir(parents=True, exist_ok=True)
            path = out / f"{table.scheme}_{table.problem}.csv"
        path.write_text(text)
        print(path)
    return EXIT_OK


def cmd_search(args) -> int:
    try:
        cfg = search.SearchConfig(
            s=args.s,
            p=args.p,
            q=args.q,
            restarts=args.restarts,
            rng_seed=args.seed,
            coeff_bound=args.coeff_bound,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    res = search.run_search(
        cfg, args.out, workers=args.workers or threads_default(), optimize=not args.no_optimize
    )
    fmt = _short if args.pretty else _num
    print(f"triple: {cfg.s},{cfg.p},{cfg.q}")
    print(f"restarts: {cfg.restarts}")
    print(f"seed: {cfg.rng_seed}")
    print(f"candidates: {len(res.pool)}")
    print(f"eq_tol: {fmt(cfg.eq_tol)}")
    print(f"elapsed_seconds: {fmt(res.elapsed)}")
    if not res.pool:
        return EXIT_MISMATCH
    best = res.best()
    print(f"best: {best.tableau.label}")
    print(f"best_F: {fmt(best.F_value)}")
    print(f"best_max_coeff: {fmt(best.max_coeff)}")
    for c in res.pareto():
        print(f"pareto: {c.tableau.label} F={fmt(c.F_value)} max_coeff={fmt(c.max_coeff)}")
    return EXIT_OK


def cmd_export(args) -> int:
    t = load_scheme(args.scheme)
    text = tableau.to_csv(t) if args.format == "csv" else tableau.to_text(t)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="dirkwso", description="DIRK schemes with high weak stage order.")
    sub = ap.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("list", help="list built-in schemes (or problems)")
    p.add_argument("--problems", action="store_true", help="list problem ids instead")
    p.add_argument("--pretty", action="store_true")
    p.set_defaults(func=cmd_list)

    p = sub.add_parser("verify", help="report verified properties of a scheme")
    p.add_argument("scheme", help="built-in name or tableau file")
    p.add_argument("--expect", metavar="P,Q", help="exit 1 unless order = P and WSO = Q")
    p.add_argument("--pretty", action="store_true")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("stability", help="export the stability-region boundary")
    p.add_argument("scheme")
    p.add_argument(
        "--window",
        default="-15,15,-15,15",
        metavar="XMIN,XMAX,YMIN,YMAX",
        help="plot window (write --window=-15,15,-15,15 for negative values)",
    )
    p.add_argument("--resolution", default="401,401", metavar="NX,NY")
    p.add_argument("--out", help="CSV output path (re,im rows)")
    p.add_argument("--svg", help="SVG output path")
    p.add_argument("--pretty", action="store_true")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("converge", help="time-step sweep to CSV")
    p.add_argument("--scheme", required=True, help="comma-separated scheme names or files")
    p.add_argument("--problem", required=True)
    p.add_argument("--dts", required=True, help="comma-separated step sizes")
    p.add_argument("--n", type=int, help="spatial resolution")
    p.add_argument("--space-order", type=int, help="finite-difference order")
    p.add_argument("--window", action="append", metavar="LO,HI", help="fit window (repeatable)")
    p.add_argument("--floor", type=float, help="error floor for err_u")
    p.add_argument("--floor-ux", type=float, help="error floor for err_ux")
    p.add_argument("--precision", choices=("double", "extended"), default="double")
    p.add_argument("--plotdata", action="store_true", help="append log10 columns")
    p.add_argument("--workers", type=int, help="parallel schemes (default DIRKWSO_THREADS)")
    p.add_argument("--out", help="CSV file, or directory for one file per scheme")
    p.set_defaults(func=cmd_converge)

    p = sub.add_parser("search", help="search for new schemes")
    p.add_argument("--s", type=int, required=True)
    p.add_argument("--p", type=int, required=True)
    p.add_argument("--q", type=int, required=True)
    p.add_argument("--restarts", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coeff-bound", type=float, default=20.0)
    p.add_argument("--out", required=True, help="candidate pool directory")
    p.add_argument("--workers", type=int, help="parallel restarts (default DIRKWSO_THREADS)")
    p.add_argument("--no-optimize", action="store_true", help="stop after the feasibility steps")
    p.add_argument("--pretty", action="store_true")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("export", help="write a tableau as text or CSV")
    p.add_argument("scheme")
    p.add_argument("--format", choices=("text", "csv"), default="text")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"dirkwso: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

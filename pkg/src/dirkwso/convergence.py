"""Time-step sweeps, slope fits and CSV output."""
from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .integrator import IntegrationResult, IvpProblem, NewtonError, integrate
from .tableau import Tableau

FLOOR_FACTOR = 10.0
RK4_REF_DT = 1e-6


class FitError(ValueError):
    """Too few usable rows in a fit window."""


@dataclass
class Row:
    dt: float
    err_u: float
    err_ux: Optional[float] = None
    newton_iterations: int = 0
    linear_solves: int = 0
    failure: Optional[str] = None


@dataclass
class FitWindow:
    dt_lo: float
    dt_hi: float
    slope_u: Optional[float] = None
    slope_ux: Optional[float] = None


@dataclass
class ConvergenceTable:
    scheme: str
    problem: str
    rows: list = field(default_factory=list)
    fit_windows: list = field(default_factory=list)
    error_floor: float = 0.0
    error_floor_ux: Optional[float] = None  # defaults to ``error_floor``
    norm: str = "max"

    def sorted(self):
        self.rows.sort(key=lambda r: -r.dt)
        return self

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in self.rows])


def steps_for(T: float, dt: float) -> int:
    """Number of steps covering ``T`` exactly; rejects ``dt`` not dividing ``T``."""
    n = round(T / dt)
    if n < 0 or abs(n * dt - T) > 1e-12 * max(1.0, abs(T)):
        raise ValueError(f"dt = {dt!r} does not divide T = {T!r}")
    return int(n)


def sweep(
    t: Tableau,
    p: IvpProblem,
    dts: Sequence[float],
    reference=None,
    use_affine: bool = True,
    precision: str = "double",
    error_floor: Optional[float] = None,
    error_floor_ux: Optional[float] = None,
) -> ConvergenceTable:
    """Integrate once per ``dt`` and record final-time max-norm errors.

    ``reference`` supplies the final state for problems without an exact
    solution.  Failed integrations are kept as rows with ``nan`` errors.
    The floors default to the problem's ``error_floor``; see
    :func:`measure_floor` for estimating them.
    """
    table = ConvergenceTable(
        t.label,
        p.name,
        error_floor=p.error_floor if error_floor is None else error_floor,
        error_floor_ux=error_floor_ux,
    )
    t0, T = p.t_span
    for dt in dts:
        n = steps_for(T - t0, dt)
        try:
            res: IntegrationResult = integrate(
                t, p, dt, n, use_affine=use_affine, precision=precision
            )
        except (NewtonError, np.linalg.LinAlgError, FloatingPointError) as exc:
            table.rows.append(Row(dt, math.nan, None, failure=str(exc)))
            continue
        err_u = res.err_u
        if reference is not None:
            err_u = float(np.abs(res.state.u_n - reference).max())
        st = res.state.stats
        table.rows.append(
            Row(dt, err_u, res.err_ux, st.newton_iterations, st.linear_solves)
        )
    return table.sorted()


def measure_floor(t: Tableau, p: IvpProblem, dt: float, precision: str = "double"):
    """Errors ``(err_u, err_ux)`` of one run at a ``dt`` small enough that
    the time error is negligible: an estimate of the spatial error floor."""
    t0, T = p.t_span
    res = integrate(t, p, dt, steps_for(T - t0, dt), precision=precision)
    return res.err_u, res.err_ux


def _loglog_slope(dt, err):
    x = np.log(dt)
    y = np.log(err)
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(coef[0])


def fit_slope(table: ConvergenceTable, window, min_rows: int = 3) -> FitWindow:
    """Least-squares slopes of ``log err`` against ``log dt`` on ``window``.

    Rows at or below ten times the column's error floor and failed rows are
    excluded.  The
    ``u_x`` slope is ``None`` when that column is absent or too short.
    """
    lo, hi = window
    out = FitWindow(lo, hi)
    floor_ux = table.error_floor if table.error_floor_ux is None else table.error_floor_ux
    for name, floor in (("err_u", table.error_floor), ("err_ux", floor_ux)):
        cut = FLOOR_FACTOR * floor
        pts = [
            (r.dt, getattr(r, name))
            for r in table.rows
            if lo * (1 - 1e-12) <= r.dt <= hi * (1 + 1e-12)
            and getattr(r, name) is not None
            and np.isfinite(getattr(r, name))
            and getattr(r, name) > cut
        ]
        if len(pts) < min_rows:
            if name == "err_u":
                raise FitError(
                    f"window [{lo:g}, {hi:g}] has {len(pts)} usable rows, need {min_rows}"
                )
            continue
        dt, err = map(np.array, zip(*pts))
        slope = _loglog_slope(dt, err)
        if name == "err_u":
            out.slope_u = slope
        else:
            out.slope_ux = slope
    table.fit_windows.append(out)
    return out


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------

HEADER = "dt,err_u,err_ux,slope_window"


def _g(x) -> str:
    if x is None:
        return ""
    return repr(float(x)) if np.isfinite(x) else "nan"


def to_csv(table: ConvergenceTable, plotdata: bool = False) -> str:
    """Serialize a table.

    Columns ``dt,err_u,err_ux,slope_window``; ``slope_window`` holds the index
    of the first fit window containing the row (empty if none).  Fitted
    slopes and solver statistics follow as ``#`` comment lines.  With
    ``plotdata`` the columns ``log10_dt,log10_err_u,log10_err_ux`` are
    appended.
    """
    buf = io.StringIO()
    header = HEADER + (",log10_dt,log10_err_u,log10_err_ux" if plotdata else "")
    buf.write(header + "\n")
    for r in table.rows:
        win = ""
        for k, w in enumerate(table.fit_windows):
            if w.dt_lo * (1 - 1e-12) <= r.dt <= w.dt_hi * (1 + 1e-12):
                win = str(k)
                break
        cells = [_g(r.dt), _g(r.err_u), _g(r.err_ux), win]
        if plotdata:
            cells += [
                _g(math.log10(r.dt)),
                _g(math.log10(r.err_u)) if r.err_u and r.err_u > 0 else "",
                _g(math.log10(r.err_ux)) if r.err_ux and r.err_ux > 0 else "",
            ]
        buf.write(",".join(cells) + "\n")
    if table.rows or table.fit_windows:
        buf.write(f"# scheme={table.scheme} problem={table.problem} norm={table.norm}"
                  f" error_floor={_g(table.error_floor)}"
                  f" error_floor_ux={_g(table.error_floor_ux)}\n")
    for k, w in enumerate(table.fit_windows):
        buf.write(
            f"# window {k}: dt in [{_g(w.dt_lo)}, {_g(w.dt_hi)}]"
            f" slope_u={_g(w.slope_u)} slope_ux={_g(w.slope_ux)}\n"
        )
    for r in table.rows:
        msg = f" failure={r.failure}" if r.failure else ""
        buf.write(
            f"# stats dt={_g(r.dt)} newton_iterations={r.newton_iterations}"
            f" linear_solves={r.linear_solves}{msg}\n"
        )
    return buf.getvalue()


def emit(table: ConvergenceTable, path, plotdata: bool = False) -> Path:
    path = Path(path)
    path.write_text(to_csv(table, plotdata=plotdata))
    return path


def read_csv(text: str) -> list[tuple]:
    """Parse the data rows written by :func:`to_csv` (comments skipped)."""
    out = []
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    for ln in lines[1:]:
        cells = ln.split(",")
        out.append(tuple(float(c) if c else None for c in cells[:3]))
    return out


# --------------------------------------------------------------------------
# Reference solutions
# --------------------------------------------------------------------------


def rk4_final(rhs, u0, T: float, dt: float) -> np.ndarray:
    """Classical explicit RK4 with fixed steps."""
    n = steps_for(T, dt)
    u = np.array(u0, dtype=float)
    t = 0.0
    for k in range(n):
        t = k * dt
        k1 = rhs(t, u)
        k2 = rhs(t + dt / 2, u + dt / 2 * k1)
        k3 = rhs(t + dt / 2, u + dt / 2 * k2)
        k4 = rhs(t + dt, u + dt * k3)
        u = u + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return u


def _vdp_rk4(mu: float, x: float, y: float, T: float, dt: float):
    # scalar loop: an order of magnitude faster than numpy on 2-vectors
    n = steps_for(T, dt)
    h2 = dt / 2
    h6 = dt / 6
    for _ in range(n):
        k1x = y
        k1y = mu * (1 - x * x) * y - x
        xa, ya = x + h2 * k1x, y + h2 * k1y
        k2x = ya
        k2y = mu * (1 - xa * xa) * ya - xa
        xb, yb = x + h2 * k2x, y + h2 * k2y
        k3x = yb
        k3y = mu * (1 - xb * xb) * yb - xb
        xc, yc = x + dt * k3x, y + dt * k3y
        k4x = yc
        k4y = mu * (1 - xc * xc) * yc - xc
        x = x + h6 * (k1x + 2 * k2x + 2 * k3x + k4x)
        y = y + h6 * (k1y + 2 * k2y + 2 * k3y + k4y)
    return np.array([x, y])


def default_cache_dir() -> Path:
    return Path(os.environ.get("DIRKWSO_CACHE", Path.home() / ".cache" / "dirkwso"))


def vdp_reference(mu: float = 500.0, T: float = 10.0, dt: float = RK4_REF_DT,
                  u0=(2.0, 0.0), cache_dir=None) -> np.ndarray:
    """Final state of Van der Pol by classical RK4, cached on disk."""
    cache_dir = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    key = f"vdp_mu{mu!r}_T{T!r}_dt{dt!r}_x{u0[0]!r}_y{u0[1]!r}_rk4.npy"
    path = cache_dir / key
    if path.exists():
        return np.load(path)
    ref = _vdp_rk4(float(mu), float(u0[0]), float(u0[1]), T, dt)
    cache_dir.mkdir(parents=True, exist_ok=True)
    np.save(path, ref)
    return ref

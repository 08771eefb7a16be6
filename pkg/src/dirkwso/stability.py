"""Stability function, A-/L-stability scans and stability-region export."""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .tableau import Tableau

A_STAB_TOL = 1e-8
L_STAB_TOL = 1e-8
Z_MINUS_INF = -1e12
POLE_TOL = 1e-14

# relaxed imaginary-axis grid used inside optimization loops
CR6_GRID = np.concatenate([[0.0], np.logspace(-3, 3, 127)])
FINE_SAMPLES = 100_000


class ResolventError(ZeroDivisionError):
    """``I - zA`` is singular (``z`` hits ``1/a_ii``)."""


def resolvent_solve(A: np.ndarray, z, v: np.ndarray) -> np.ndarray:
    """Solve ``(I - zA) x = v`` by forward substitution.

    ``z`` may be a scalar or an array; the result has shape ``(s,) + z.shape``.
    """
    z = np.asarray(z, dtype=complex)
    s = A.shape[0]
    denom = 1.0 - z[..., None] * np.diag(A)
    if np.any(np.abs(denom) <= POLE_TOL):
        raise ResolventError("z is a pole of the resolvent (z * a_ii = 1)")
    x = np.empty((s,) + z.shape, dtype=complex)
    for i in range(s):
        acc = v[i] + z * np.tensordot(A[i, :i], x[:i], axes=(0, 0)) if i else v[i] + 0 * z
        x[i] = acc / denom[..., i]
    return x


def R(t: Tableau, z):
    """Stability function ``1 + z b^T (I - zA)^{-1} e``."""
    z_arr = np.asarray(z, dtype=complex)
    x = resolvent_solve(t.A, z_arr, np.ones(t.s))
    val = 1.0 + z_arr * np.tensordot(t.b, x, axes=(0, 0))
    return complex(val) if val.ndim == 0 else val


def R_det(t: Tableau, z):
    """Determinant-ratio form ``det(I - zA + z e b^T) / det(I - zA)``."""
    z_arr = np.atleast_1d(np.asarray(z, dtype=complex))
    s = t.s
    eye = np.eye(s)
    M = eye - z_arr[:, None, None] * (t.A - np.outer(np.ones(s), t.b))
    num = np.linalg.det(M)
    den = np.prod(1.0 - z_arr[:, None] * np.diag(t.A), axis=1)
    out = num / den
    return complex(out[0]) if np.ndim(z) == 0 else out.reshape(np.shape(z))


@dataclass
class StabilityReport:
    a_stable: bool
    l_stable: bool
    max_imag_axis_modulus: float
    r_at_minus_inf: float
    diag_nonneg: bool
    sample_count: int
    mode: str = "fine"


def imag_axis_samples(mode: str = "fine", n: int = FINE_SAMPLES) -> np.ndarray:
    if mode == "coarse":
        return CR6_GRID.copy()
    if mode != "fine":
        raise ValueError(f"mode must be 'coarse' or 'fine', got {mode!r}")
    # midpoints of a uniform partition of (-pi/2, pi/2) mapped by tan
    theta = -np.pi / 2 + (np.arange(n) + 0.5) * (np.pi / n)
    return np.concatenate([[0.0], np.tan(theta)])


def check_a_stability(t: Tableau, mode: str = "fine") -> StabilityReport:
    y = imag_axis_samples(mode)
    diag_ok = bool(np.all(np.diag(t.A) >= 0.0))
    try:
        mods = np.abs(R(t, 1j * y))
        max_mod = float(np.max(mods))
    except ResolventError:
        max_mod = float("inf")
    if not np.isfinite(max_mod):
        max_mod = float("inf")
    try:
        r_inf = abs(R(t, Z_MINUS_INF))
    except ResolventError:
        r_inf = float("inf")
    a_stable = diag_ok and max_mod <= 1.0 + A_STAB_TOL
    l_stable = a_stable and r_inf <= L_STAB_TOL
    return StabilityReport(
        a_stable=a_stable,
        l_stable=l_stable,
        max_imag_axis_modulus=max_mod,
        r_at_minus_inf=float(r_inf),
        diag_nonneg=diag_ok,
        sample_count=int(y.size),
        mode=mode,
    )


# --------------------------------------------------------------------------
# Region boundary
# --------------------------------------------------------------------------


def modulus_grid(t: Tableau, window, resolution):
    """|R| sampled on a rectangular grid; returns (x, y, values[ny, nx])."""
    xmin, xmax, ymin, ymax = window
    nx, ny = resolution
    x = np.linspace(xmin, xmax, nx)
    y = np.linspace(ymin, ymax, ny)
    Z = x[None, :] + 1j * y[:, None]
    diag = np.diag(t.A)
    with np.errstate(all="ignore"):
        # nudge grid nodes that sit exactly on a pole
        hit = np.any(np.abs(1.0 - Z[..., None] * diag) <= POLE_TOL, axis=-1)
        Z = np.where(hit, Z + 1e-9 * (xmax - xmin), Z)
        vals = np.abs(R(t, Z))
    vals = np.where(np.isfinite(vals), vals, 1e300)
    return x, y, vals


def region_boundary(t: Tableau, window=(-15.0, 15.0, -15.0, 15.0), resolution=(401, 401)):
    """Level curves ``|R(z)| = 1`` inside ``window = (xmin, xmax, ymin, ymax)``.

    Uses marching squares; returns a list of curves, each a complex array of
    points.  The list is empty when the window contains no boundary.
    """
    from skimage.measure import find_contours

    x, y, vals = modulus_grid(t, window, resolution)
    curves = []
    for seg in find_contours(vals, 1.0):
        rows, cols = seg[:, 0], seg[:, 1]
        re = np.interp(cols, np.arange(x.size), x)
        im = np.interp(rows, np.arange(y.size), y)
        curves.append(re + 1j * im)
    return curves


def boundary_csv(curves) -> str:
    """``re,im`` rows; consecutive curves are separated by a ``nan,nan`` row."""
    buf = io.StringIO()
    buf.write("re,im\n")
    for n, curve in enumerate(curves):
        if n:
            buf.write("nan,nan\n")
        for zz in curve:
            buf.write(f"{zz.real:.17g},{zz.imag:.17g}\n")
    return buf.getvalue()


def boundary_svg(curves, window) -> str:
    """SVG with one polyline per curve; one user unit equals one axis unit."""
    xmin, xmax, ymin, ymax = window
    w, h = xmax - xmin, ymax - ymin
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="{xmin:g} {-ymax:g} {w:g} {h:g}">',
        f'<line x1="{xmin:g}" y1="0" x2="{xmax:g}" y2="0" stroke="#999" stroke-width="{w / 800:g}"/>',
        f'<line x1="0" y1="{-ymax:g}" x2="0" y2="{-ymin:g}" stroke="#999" stroke-width="{w / 800:g}"/>',
    ]
    for curve in curves:
        pts = " ".join(f"{zz.real:.6g},{-zz.imag:.6g}" for zz in curve)
        out.append(
            f'<polyline points="{pts}" fill="none" stroke="black" stroke-width="{w / 400:g}"/>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"

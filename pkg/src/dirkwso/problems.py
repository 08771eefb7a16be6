"""Test problems: Prothero-Robinson, method-of-lines PDEs and Van der Pol.

One-dimensional problems live on ``[0, 1]`` with ``n`` cells (nodes
``x_j = j / n``).  Dirichlet values are eliminated, so the state holds
interior nodes only and the boundary data enter through an affine term.
Manufactured forcings are derived symbolically with sympy and compiled to
numpy functions.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import sympy

from .integrator import IvpProblem

# (order, derivative) pairs with a centered interior stencil
SUPPORTED = {(2, 1), (2, 2), (4, 1), (4, 2), (6, 1), (6, 2), (2, 4)}


# --------------------------------------------------------------------------
# Finite-difference weights
# --------------------------------------------------------------------------


def fd_weights(offsets, derivative: int, exact: bool = False):
    """Weights ``w`` with ``sum_k w_k f(x0 + offsets_k h) ~ h^d f^(d)(x0)``.

    Fornberg's recursion.  With ``exact=True`` the offsets are treated as
    rationals and :class:`fractions.Fraction` weights are returned.
    """
    one = Fraction(1) if exact else 1.0
    z = [Fraction(o) if exact else float(o) for o in offsets]
    n = len(z)
    m = derivative
    if m >= n:
        raise ValueError("need more points than the derivative order")
    C = [[0 * one] * (m + 1) for _ in range(n)]
    c1 = one
    c4 = z[0]
    C[0][0] = one
    for i in range(1, n):
        mn = min(i, m)
        c2 = one
        c5 = c4
        c4 = z[i]
        for j in range(i):
            c3 = z[i] - z[j]
            c2 = c2 * c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    C[i][k] = c1 * (k * C[i - 1][k - 1] - c5 * C[i - 1][k]) / c2
                C[i][0] = -c1 * c5 * C[i - 1][0] / c2
            for k in range(mn, 0, -1):
                C[j][k] = (c4 * C[j][k] - k * C[j][k - 1]) / c3
            C[j][0] = c4 * C[j][0] / c3
        c1 = c2
    return [C[k][m] for k in range(n)]


def _interior_width(order: int, derivative: int) -> int:
    # centered stencils: points = 2 * floor((d + 1) / 2) - 1 + order
    return 2 * ((derivative + 1) // 2) - 1 + order


def stencil(order: int, derivative: int) -> list:
    """Centered interior weights (unscaled by ``h``) as exact fractions."""
    if (order, derivative) not in SUPPORTED:
        raise ValueError(
            f"unsupported stencil (order={order}, derivative={derivative}); "
            f"supported: {sorted(SUPPORTED)}"
        )
    w = _interior_width(order, derivative)
    half = w // 2
    return fd_weights(range(-half, half + 1), derivative, exact=True)


def diff_matrix(n: int, order: int, derivative: int) -> sp.csr_matrix:
    """Derivative matrix on all ``n + 1`` nodes of the unit interval.

    Rows whose centered stencil would leave the grid use the nearest
    one-sided window of ``order + derivative`` points, which keeps the formal
    order of accuracy.
    """
    if (order, derivative) not in SUPPORTED:
        raise ValueError(f"unsupported stencil (order={order}, derivative={derivative})")
    w_int = _interior_width(order, derivative)
    half = w_int // 2
    w_bnd = order + derivative
    if n + 1 < w_bnd:
        raise ValueError(f"n = {n} is too small for a {w_bnd}-point stencil")
    h = 1.0 / n
    centered = np.array(fd_weights(range(-half, half + 1), derivative), dtype=float)
    rows, cols, vals = [], [], []
    for i in range(n + 1):
        if half <= i <= n - half:
            idx = np.arange(i - half, i + half + 1)
            wts = centered
        else:
            lo = 0 if i < half else n + 1 - w_bnd
            idx = np.arange(lo, lo + w_bnd)
            wts = np.array(fd_weights(idx - i, derivative), dtype=float)
        rows.extend([i] * idx.size)
        cols.extend(idx)
        vals.extend(wts)
    D = sp.csr_matrix((vals, (rows, cols)), shape=(n + 1, n + 1))
    return D / h**derivative


# --------------------------------------------------------------------------
# Grids
# --------------------------------------------------------------------------


@dataclass
class Grid1D:
    """Uniform grid on ``[0, 1]`` with ``n`` cells."""

    n: int
    order: int = 4

    def __post_init__(self):
        self.x = np.linspace(0.0, 1.0, self.n + 1)
        self.h = 1.0 / self.n
        self._ops = {}

    def D(self, derivative: int, order: Optional[int] = None) -> sp.csr_matrix:
        key = (order or self.order, derivative)
        if key not in self._ops:
            self._ops[key] = diff_matrix(self.n, key[0], derivative)
        return self._ops[key]

    def split(self, M, unknown: np.ndarray, known: np.ndarray):
        """Rows ``unknown`` of ``M``, split into unknown and known columns."""
        M = sp.csr_matrix(M)[unknown]
        return M[:, unknown].tocsc(), M[:, known].tocsc()


def cheb(N: int):
    """Chebyshev differentiation matrix on ``N + 1`` points ``cos(pi j / N)``."""
    if N == 0:
        return np.zeros((1, 1)), np.ones(1)
    x = np.cos(np.pi * np.arange(N + 1) / N)
    c = np.ones(N + 1)
    c[0] = c[-1] = 2.0
    c *= (-1.0) ** np.arange(N + 1)
    X = np.tile(x, (N + 1, 1)).T
    dX = X - X.T
    D = np.outer(c, 1.0 / c) / (dX + np.eye(N + 1))
    # negative-sum trick for the diagonal
    D -= np.diag(D.sum(axis=1))
    return D, x


@dataclass
class Grid2D:
    """Tensor-product Chebyshev grid with ``n`` points per direction on [-1, 1]^2."""

    n: int

    def __post_init__(self):
        D, x = cheb(self.n - 1)
        self.D1 = D
        self.x = x
        eye = np.eye(self.n)
        # flattening: index = i * n + j with x = x[j], y = x[i]
        self.Dx = np.kron(eye, D)
        self.Dy = np.kron(D, eye)
        D2 = D @ D
        self.Lap = np.kron(eye, D2) + np.kron(D2, eye)
        XX, YY = np.meshgrid(x, x)
        self.X = XX.ravel()
        self.Y = YY.ravel()
        interior = (np.abs(self.X) < 1.0 - 1e-14) & (np.abs(self.Y) < 1.0 - 1e-14)
        self.interior = np.flatnonzero(interior)
        self.boundary = np.flatnonzero(~interior)


# --------------------------------------------------------------------------
# Symbolic manufactured solutions
# --------------------------------------------------------------------------

_x, _t = sympy.symbols("x t", real=True)


def _lam(expr, *args):
    f = sympy.lambdify(args, expr, modules="numpy")

    def call(*vals):
        out = f(*vals)
        shape = np.broadcast(*vals).shape
        return np.broadcast_to(np.asarray(out), shape).copy() if np.ndim(out) < len(shape) else out

    return call


@dataclass(frozen=True)
class PdeSpec:
    """Manufactured-solution data for a 1D linear or Burgers problem."""

    pde: str
    u: object  # sympy expression in x, t
    kappa: object = None  # diffusion coefficient kappa(x, t) or None
    nu: object = 0  # viscosity (adv-diff, Burgers)
    advection: object = 0  # coefficient of u_x on the left-hand side
    dispersion: object = 0  # coefficient of u_xx (complex allowed)
    biharmonic: bool = False
    nonlinear: bool = False
    T: float = 1.0
    outflow_free: bool = False  # no boundary condition at x = 1
    default_n: int = 10_000
    default_order: int = 4
    field: str = "real"


_U_HEAT = sympy.cos(20 * _t) * sympy.sin(10 * _x + 10)

PDES = {
    "heat": PdeSpec("heat", _U_HEAT, kappa=sympy.Integer(1)),
    "schrodinger": PdeSpec(
        "schrodinger",
        sympy.exp(-((_x - _t) ** 2)) * sympy.cos(10 * _x) * sympy.sin(_t),
        dispersion=sympy.I * 2 * sympy.pi / 400,
        T=1.2,
        field="complex",
    ),
    "adv_diff": PdeSpec(
        "adv_diff",
        sympy.cos(5 * _t) * sympy.sin(10 * _x + 10),
        nu=sympy.Rational(1, 1000),
        advection=1,
    ),
    "advection": PdeSpec(
        "advection",
        sympy.sin(2 * sympy.pi * (_x - _t)),
        advection=1,
        outflow_free=True,
    ),
    "var_heat_x": PdeSpec(
        "var_heat_x", _U_HEAT, kappa=sympy.cos(_x + sympy.Rational(1, 10)),
        default_n=1000, default_order=6,
    ),
    "var_heat_t_slow": PdeSpec(
        "var_heat_t_slow", _U_HEAT,
        kappa=sympy.cos(sympy.Rational(1, 10) * _t + sympy.Rational(1, 5)),
        default_n=1000, default_order=6,
    ),
    "var_heat_t_fast": PdeSpec(
        "var_heat_t_fast", _U_HEAT,
        kappa=1 + sympy.Rational(1, 2) * sympy.cos(30 * _t + sympy.Rational(1, 10)),
        default_n=1000, default_order=6,
    ),
    "var_heat_t_fast_alt": PdeSpec(
        "var_heat_t_fast_alt", _U_HEAT,
        kappa=1 + sympy.Rational(1, 2) * sympy.cos(20 * _t),
        default_n=1000, default_order=6,
    ),
    "biharmonic": PdeSpec(
        "biharmonic", sympy.cos(15 * _t), biharmonic=True, default_order=2,
    ),
    "burgers": PdeSpec(
        "burgers", sympy.cos(_t), nu=sympy.Rational(1, 10), nonlinear=True,
        default_n=1000, default_order=6,
    ),
}


def _spatial_operator(spec: PdeSpec, u):
    """Right-hand side of ``u_t = N(u) + f`` applied to a sympy expression."""
    ux = sympy.diff(u, _x)
    uxx = sympy.diff(u, _x, 2)
    out = sympy.Integer(0)
    if spec.kappa is not None:
        out += sympy.diff(spec.kappa * ux, _x)
    out += spec.nu * uxx + spec.dispersion * uxx - spec.advection * ux
    if spec.biharmonic:
        out -= sympy.diff(u, _x, 4)
    if spec.nonlinear:
        out -= u * ux
    return out


@lru_cache(maxsize=None)
def manufactured(pde: str):
    """Compiled ``(u, u_x, u_t, f)`` for a registered PDE id."""
    spec = PDES[pde]
    u = spec.u
    f = sympy.diff(u, _t) - _spatial_operator(spec, u)
    return (
        _lam(u, _x, _t),
        _lam(sympy.diff(u, _x), _x, _t),
        _lam(sympy.diff(u, _t), _x, _t),
        _lam(sympy.simplify(f), _x, _t),
    )


def _kappa_funcs(spec: PdeSpec):
    k = spec.kappa
    return _lam(k, _x, _t), _lam(sympy.diff(k, _x), _x, _t), not k.has(_t)


# --------------------------------------------------------------------------
# 1D method-of-lines builders
# --------------------------------------------------------------------------


def mol_1d(pde: str, n: Optional[int] = None, order: Optional[int] = None) -> IvpProblem:
    """Method-of-lines semi-discretization of a registered 1D PDE."""
    if pde not in PDES:
        raise KeyError(f"unknown pde {pde!r}; choose from {', '.join(PDES)}")
    spec = PDES[pde]
    n = spec.default_n if n is None else int(n)
    order = spec.default_order if order is None else int(order)
    if spec.biharmonic:
        return _biharmonic(spec, n, order)
    grid = Grid1D(n, order)
    u_ex, ux_ex, _, f_ex = manufactured(pde)
    x = grid.x
    if spec.outflow_free:
        unknown = np.arange(1, n + 1)
        known = np.array([0])
    else:
        unknown = np.arange(1, n)
        known = np.array([0, n])
    xi = x[unknown]
    xk = x[known]
    dtype = complex if spec.field == "complex" else float
    D1i, D1b = grid.split(grid.D(1), unknown, known)
    D1full = grid.D(1)
    # adding a zero keeps long double inputs long double
    zero = 0j if spec.field == "complex" else 0.0

    def bvals(t):
        return u_ex(xk, t) + zero

    def full(t, u):
        v = np.empty(n + 1, dtype=np.result_type(u, dtype))
        v[unknown] = u
        v[known] = bvals(t)
        return v

    def derivative(t, u):
        return D1full @ full(t, u)

    def exact(t):
        return u_ex(xi, t) + zero

    def exact_dx(t):
        return ux_ex(x, t) + zero

    def forcing(t):
        return f_ex(xi, t) + zero

    common = dict(
        dim=unknown.size,
        u0=exact(0.0),
        t_span=(0.0, spec.T),
        exact=exact,
        exact_dx=exact_dx,
        derivative=derivative,
        field=spec.field,
        name=pde,
        meta={"n": n, "order": order, "grid": grid, "unknown": unknown, "known": known},
    )

    if spec.nonlinear:
        D2i, D2b = grid.split(grid.D(2), unknown, known)
        nu = float(spec.nu)

        def rhs(t, u):
            gb = bvals(t)
            d1 = D1i @ u + D1b @ gb
            return nu * (D2i @ u + D2b @ gb) - u * d1 + forcing(t)

        def jacobian(t, u):
            gb = bvals(t)
            d1 = D1i @ u + D1b @ gb
            return (nu * D2i - sp.diags(u) @ D1i - sp.diags(d1)).tocsc()

        return IvpProblem(rhs=rhs, jacobian=jacobian, **common)

    # linear: N(u) = a(x, t) u_xx + b(x, t) u_x
    D2i, D2b = grid.split(grid.D(2), unknown, known)
    c_adv = float(spec.advection)
    c2 = complex(spec.nu + spec.dispersion) if spec.field == "complex" else float(spec.nu)
    if spec.kappa is not None:
        kap, dkap, autonomous = _kappa_funcs(spec)
    else:
        kap, dkap, autonomous = None, None, True

    def coeffs(t):
        a = np.full(xi.size, c2, dtype=dtype)
        b = np.full(xi.size, -c_adv, dtype=dtype)
        if kap is not None:
            a = a + kap(xi, t)
            b = b + dkap(xi, t)
        return a, b

    def build(t):
        a, b = coeffs(t)
        Li = sp.diags(a) @ D2i + sp.diags(b) @ D1i
        Lb = sp.diags(a) @ D2b + sp.diags(b) @ D1b
        return Li.tocsc(), Lb.tocsc()

    if autonomous:
        L0, Lb0 = build(0.0)
        L = L0

        def gterm(t):
            return Lb0 @ bvals(t) + forcing(t)

        def rhs(t, u):
            return L0 @ u + gterm(t)

        def jacobian(t, u):
            return L0
    else:

        def L(t):
            return build(t)[0]

        def gterm(t):
            return build(t)[1] @ bvals(t) + forcing(t)

        def rhs(t, u):
            Li, Lb = build(t)
            return Li @ u + Lb @ bvals(t) + forcing(t)

        def jacobian(t, u):
            return build(t)[0]

    return IvpProblem(rhs=rhs, jacobian=jacobian, affine=(L, gterm), **common)


def _biharmonic(spec: PdeSpec, n: int, order: int) -> IvpProblem:
    """``u_t = -u_xxxx + f`` with clamped ends, ghost-point closure.

    Ghost values follow from the centered approximation of the boundary
    slope, ``u_{-1} = u_1 - 2 h u_x(0)`` and ``u_{n+1} = u_{n-1} + 2 h u_x(1)``.
    """
    if order != 2:
        raise ValueError("the biharmonic problem uses the 2nd-order stencil")
    if n < 4:
        raise ValueError("n too small for the biharmonic stencil")
    grid = Grid1D(n, 2)
    h = grid.h
    x = grid.x
    m = n - 1
    xi = x[1:n]
    u_ex, ux_ex, _, f_ex = manufactured(spec.pde)
    w = np.array([1.0, -4.0, 6.0, -4.0, 1.0])
    L = sp.diags([w[k] * np.ones(m - abs(k - 2)) for k in range(5)], [-2, -1, 0, 1, 2], format="lil")
    L[0, 0] += 1.0  # ghost u_{-1} = u_1 - ...
    L[m - 1, m - 1] += 1.0
    L = (-L.tocsc()) / h**4
    D1 = grid.D(1, order=2)

    def bterm(t):
        g0, g1 = u_ex(np.array([0.0, 1.0]), t)
        s0, s1 = ux_ex(np.array([0.0, 1.0]), t)
        v = np.zeros(m)
        # row 1: u_{-1} - 4 u_0 ; row 2: u_0 ; mirrored on the right
        v[0] += -(-2.0 * h * s0) + 4.0 * g0
        v[1] += -g0
        v[m - 1] += -(2.0 * h * s1) + 4.0 * g1
        v[m - 2] += -g1
        return v / h**4

    def gterm(t):
        return bterm(t) + f_ex(xi, t)

    def rhs(t, u):
        return L @ u + gterm(t)

    def lift(t):
        # Cubic q(x) with q(0) = g0, q(1) = g1 and centered end slopes
        # (q(h) - q(-h)) / 2h = s0, (q(1+h) - q(1-h)) / 2h = s1.  Its node
        # values satisfy L q + bterm = 0 exactly, ghost rows included.
        g0, g1 = u_ex(np.array([0.0, 1.0]), t)
        s0, s1 = ux_ex(np.array([0.0, 1.0]), t)
        # closed form, so it evaluates in the float type of t
        a0 = g0
        a3 = (s0 + s1 - 2 * (g1 - g0)) / (1 + 2 * h * h)
        a1 = s0 - h * h * a3
        a2 = (g1 - g0) - a1 - a3
        return a0 + xi * (a1 + xi * (a2 + xi * a3))

    def exact(t):
        return u_ex(xi, t)

    def full(t, u):
        v = np.empty(n + 1)
        v[1:n] = u
        v[[0, n]] = u_ex(np.array([0.0, 1.0]), t)
        return v

    return IvpProblem(
        dim=m,
        rhs=rhs,
        jacobian=lambda t, u: L,
        affine=(L, gterm),
        lift=(lift, lambda t: f_ex(xi, t)),
        u0=exact(0.0),
        t_span=(0.0, spec.T),
        exact=exact,
        exact_dx=lambda t: ux_ex(x, t),
        derivative=lambda t, u: D1 @ full(t, u),
        name=spec.pde,
        meta={"n": n, "order": 2, "grid": grid},
    )


# --------------------------------------------------------------------------
# Other problems
# --------------------------------------------------------------------------

PR_LAMBDA = -1e4
PR_T = 10.0


def _pr_profile(name: str):
    if name == "default":
        return (
            lambda t: np.exp(-t) * np.sin(10 * t) + np.cos(20 * t),
            lambda t: np.exp(-t) * (10 * np.cos(10 * t) - np.sin(10 * t)) - 20 * np.sin(20 * t),
        )
    raise KeyError(f"unknown profile {name!r}")


def prothero_robinson(
    lam: complex = PR_LAMBDA,
    phi="default",
    T: float = PR_T,
    u0: Optional[float] = None,
) -> IvpProblem:
    """``u' = lam (u - phi(t)) + phi'(t)``; exact solution ``phi`` when ``u0 = phi(0)``.

    ``phi`` is a profile name or a ``(phi, dphi)`` pair of callables.
    """
    if np.real(lam) > 0:
        raise ValueError("Re(lam) must be <= 0")
    ph, dph = _pr_profile(phi) if isinstance(phi, str) else phi
    field = "complex" if np.iscomplexobj(lam) else "real"
    lam = complex(lam) if field == "complex" else float(lam)
    start = ph(0.0) if u0 is None else u0
    offset = start - ph(0.0)
    Lmat = np.array([[lam]])

    def exact(t):
        return np.array([ph(t) + offset * np.exp(lam * t)])

    return IvpProblem(
        dim=1,
        rhs=lambda t, u: lam * (u - ph(t)) + dph(t),
        jacobian=lambda t, u: Lmat,
        affine=(Lmat, lambda t: np.array([dph(t) - lam * ph(t)])),
        u0=[start],
        t_span=(0.0, T),
        exact=exact,
        field=field,
        name="prothero_robinson",
    )


VDP_MU = 500.0
VDP_T = 10.0


def van_der_pol(mu: float = VDP_MU, T: float = VDP_T, u0=(2.0, 0.0)) -> IvpProblem:
    """``x' = y``, ``y' = mu (1 - x^2) y - x``.  No closed-form solution."""
    if mu < 0:
        raise ValueError("mu must be >= 0")

    def rhs(t, u):
        x, y = u
        return np.array([y, mu * (1.0 - x * x) * y - x])

    def jacobian(t, u):
        x, y = u
        return np.array([[0.0, 1.0], [-2.0 * mu * x * y - 1.0, mu * (1.0 - x * x)]])

    return IvpProblem(
        dim=2,
        rhs=rhs,
        jacobian=jacobian,
        u0=np.array(u0, dtype=float),
        t_span=(0.0, T),
        name="van_der_pol",
        meta={"mu": mu},
    )


ADVDIFF2D_NU = 0.1


def mol_2d_advdiff(n: int = 30, nu: float = ADVDIFF2D_NU, T: float = 1.0) -> IvpProblem:
    """``u_t + u_x + u_y = nu (u_xx + u_yy) + f`` on ``[-1, 1]^2``, Chebyshev collocation."""
    if n < 8:
        raise ValueError("n must be >= 8")
    g = Grid2D(n)
    x, y, t = sympy.symbols("x y t", real=True)
    pi = sympy.pi
    u = sympy.exp(-pi**2 / 8 * t) * sympy.sin(pi * x + pi / 4) * sympy.sin(pi * y + pi / 4)
    f = (
        sympy.diff(u, t)
        + sympy.diff(u, x)
        + sympy.diff(u, y)
        - nu * (sympy.diff(u, x, 2) + sympy.diff(u, y, 2))
    )
    u_f = sympy.lambdify((x, y, t), u, "numpy")
    ux_f = sympy.lambdify((x, y, t), sympy.diff(u, x), "numpy")
    uy_f = sympy.lambdify((x, y, t), sympy.diff(u, y), "numpy")
    f_f = sympy.lambdify((x, y, t), f, "numpy")
    Lfull = nu * g.Lap - g.Dx - g.Dy
    I, B = g.interior, g.boundary
    L = Lfull[np.ix_(I, I)]
    Lb = Lfull[np.ix_(I, B)]
    Xi, Yi, Xb, Yb = g.X[I], g.Y[I], g.X[B], g.Y[B]

    def gterm(tt):
        return Lb @ u_f(Xb, Yb, tt) + f_f(Xi, Yi, tt)

    def full(tt, v):
        w = np.empty(n * n)
        w[I] = v
        w[B] = u_f(Xb, Yb, tt)
        return w

    def derivative(tt, v):
        w = full(tt, v)
        return np.stack([g.Dx @ w, g.Dy @ w])

    def exact_dx(tt):
        return np.stack([ux_f(g.X, g.Y, tt), uy_f(g.X, g.Y, tt)])

    def exact(tt):
        return u_f(Xi, Yi, tt)

    return IvpProblem(
        dim=I.size,
        rhs=lambda tt, v: L @ v + gterm(tt),
        jacobian=lambda tt, v: L,
        affine=(L, gterm),
        u0=exact(0.0),
        t_span=(0.0, T),
        exact=exact,
        exact_dx=exact_dx,
        derivative=derivative,
        name="advdiff_2d",
        meta={"n": n, "grid": g, "laplacian": g.Lap},
    )


# --------------------------------------------------------------------------
# Registry
# --------------------------------------------------------------------------


def _registry() -> dict[str, Callable[..., IvpProblem]]:
    reg: dict[str, Callable[..., IvpProblem]] = {
        "prothero_robinson": prothero_robinson,
        "van_der_pol": van_der_pol,
        "advdiff_2d": mol_2d_advdiff,
    }
    for pde in PDES:
        reg[pde] = lambda pde=pde, **kw: mol_1d(pde, **kw)
    return reg


REGISTRY = _registry()


def problem_ids() -> list[str]:
    return list(REGISTRY)


def get_problem(pid: str, **kwargs) -> IvpProblem:
    try:
        make = REGISTRY[pid]
    except KeyError:
        raise KeyError(f"unknown problem {pid!r}; choose from {', '.join(REGISTRY)}") from None
    return make(**kwargs)

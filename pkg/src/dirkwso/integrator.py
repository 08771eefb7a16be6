"""Fixed-step DIRK time stepping.

Each stage solves ``g = r_i + dt a_ii f(t_n + c_i dt, g)`` with
``r_i = u_n + dt sum_{j<i} a_ij F_j``.  Affine problems ``f = L u + g(t)`` are
solved directly with a factorization of ``I - dt a_ii L`` cached per
``(dt, a_ii)``; all other problems use Newton's method.  After a stage is
solved its slope is recovered as ``F_i = (g_i - r_i) / (dt a_ii)``, which
avoids multiplying the stage value by a possibly huge operator.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from dataclasses import field as dc_field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .tableau import Tableau

NEWTON_TOL = 1e-12
NEWTON_MAX_ITER = 25
FD_EPS = 1e-7


class NewtonError(RuntimeError):
    """Stage equation could not be solved."""

    def __init__(self, message: str, stage: Optional[int] = None):
        super().__init__(message if stage is None else f"stage {stage}: {message}")
        self.stage = stage


@dataclass
class IvpProblem:
    """Initial-value problem ``u' = f(t, u)`` on ``[t0, T]``.

    ``jacobian`` may return a dense array, a scipy sparse matrix or a 1-D
    array (diagonal Jacobian).  ``affine`` is a pair ``(L, g)`` with
    ``f(t, u) = L u + g(t)``; ``L`` may itself be a callable ``L(t)`` for
    non-autonomous operators.  ``derivative`` maps ``(t, u)`` to a discrete
    spatial derivative of the state, compared against ``exact_dx``.

    ``lift`` optionally splits the affine term as ``g(t) = -L v(t) + h(t)``
    and is given as the pair ``(v, h)``.  The direct stage solve then works
    with ``g - v``, which keeps very large boundary contributions (fourth
    derivatives on fine grids) out of the right-hand side.
    """

    dim: int
    rhs: Callable
    u0: np.ndarray
    t_span: tuple
    jacobian: Optional[Callable] = None
    affine: Optional[tuple] = None
    exact: Optional[Callable] = None
    exact_dx: Optional[Callable] = None
    derivative: Optional[Callable] = None
    field: str = "real"
    lift: Optional[tuple] = None
    name: str = "ivp"
    error_floor: float = 0.0
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        dtype = complex if self.field == "complex" else float
        self.u0 = np.asarray(self.u0, dtype=dtype).reshape(self.dim)

    @property
    def dtype(self):
        return complex if self.field == "complex" else float

    def operator_at(self, t: float):
        L = self.affine[0]
        return L(t) if callable(L) else L


@dataclass
class Stats:
    newton_iterations: int = 0
    linear_solves: int = 0
    rejected_solves: int = 0
    factorizations: int = 0


@dataclass
class StepperState:
    t_n: float
    u_n: np.ndarray
    stats: Stats = dc_field(default_factory=Stats)
    cache: dict = dc_field(default_factory=dict, repr=False)


def _to_operator(J, m):
    if sp.issparse(J):
        return J.tocsc()
    J = np.asarray(J)
    if J.ndim == 1:
        return sp.diags(J, format="csc")
    return J


def _factor(M):
    """Factorization object with a ``solve`` method."""
    if sp.issparse(M):
        lu = spla.splu(M.tocsc())
        return lu.solve
    lu = sla.lu_factor(M)
    return lambda r: sla.lu_solve(lu, r)


def _shifted(Jop, scale, m, dtype):
    """``I - scale * J``."""
    if sp.issparse(Jop):
        return (sp.identity(m, dtype=dtype, format="csc") - scale * Jop).tocsc()
    return np.eye(m, dtype=dtype) - scale * Jop


def fd_jacobian(rhs, t, u, eps: float = FD_EPS):
    """Forward-difference dense Jacobian."""
    f0 = rhs(t, u)
    m = u.size
    J = np.empty((m, m), dtype=np.result_type(f0, u))
    for k in range(m):
        du = eps * max(1.0, abs(u[k]))
        up = u.copy()
        up[k] += du
        J[:, k] = (rhs(t, up) - f0) / du
    return J


def newton_solve(
    residual: Callable,
    jac_solve: Callable,
    guess: np.ndarray,
    tol: float = NEWTON_TOL,
    max_iter: int = NEWTON_MAX_ITER,
    stats: Optional[Stats] = None,
    stage: Optional[int] = None,
):
    """Solve ``residual(g) = 0`` by Newton's method.

    ``jac_solve(g, r)`` returns the Newton correction ``delta`` solving
    ``G'(g) delta = r``.  Convergence is declared once
    ``|residual(g)|_inf <= tol * (1 + |g|_inf)``.
    """
    g = np.array(guess, copy=True)
    r = residual(g)
    it = 0
    while np.abs(r).max() > tol * (1.0 + np.abs(g).max()):
        if it >= max_iter:
            if stats is not None:
                stats.rejected_solves += 1
            raise NewtonError(
                f"no convergence after {max_iter} iterations "
                f"(residual {np.abs(r).max():.3e})",
                stage,
            )
        delta = jac_solve(g, r)
        if stats is not None:
            stats.linear_solves += 1
        g = g - delta
        if not np.all(np.isfinite(g)):
            if stats is not None:
                stats.rejected_solves += 1
            raise NewtonError("Newton iterate became non-finite", stage)
        r = residual(g)
        it += 1
    if stats is not None:
        stats.newton_iterations += it
    return g, it


def _affine_stage(tab, prob, state, dt, i, ti, r, aii, refine=0):
    """Direct solve of ``(I - dt a_ii L(t_i)) g = r + dt a_ii g_force(t_i)``.

    With ``refine > 0`` the working arrays are long double: the double LU
    factorization is followed by ``refine`` steps of iterative refinement
    with residuals in long double.
    """
    m = prob.dim
    gfun = prob.affine[1]
    L = prob.affine[0]
    if prob.lift is not None and not callable(L):
        v = prob.lift[0](ti)
        rhs_vec = r - v + dt * aii * prob.lift[1](ti)
    else:
        v = None
        rhs_vec = r + dt * aii * gfun(ti)
    if callable(L):
        Lt = _to_operator(L(ti), m)
        solve = _factor(_shifted(Lt, float(dt * aii), m, prob.dtype))
        state.stats.factorizations += 1
    else:
        Lt = None
        key = (float(dt), float(aii))
        solve = state.cache.get(key)
        if solve is None:
            solve = _factor(_shifted(_to_operator(L, m), float(dt * aii), m, prob.dtype))
            state.cache[key] = solve
            state.stats.factorizations += 1
    state.stats.linear_solves += 1
    base = np.complex128 if prob.dtype is complex else np.float64
    g = solve(np.asarray(rhs_vec).astype(base))
    if refine:
        if Lt is None:
            Lx = state.cache.get("L_ext")
            if Lx is None:
                Lx = _to_operator(L, m).astype(_ext_dtype(prob))
                state.cache["L_ext"] = Lx
        else:
            Lx = Lt.astype(_ext_dtype(prob))
        g = g.astype(_ext_dtype(prob))
        for _ in range(refine):
            res = rhs_vec - (g - (dt * aii) * (Lx @ g))
            g = g + solve(res.astype(base))
            state.stats.linear_solves += 1
    return g if v is None else g + v


def _ext_dtype(prob):
    return np.clongdouble if prob.dtype is complex else np.longdouble


def _newton_stage(tab, prob, state, dt, i, ti, r, aii, guess, tol, max_iter):
    m = prob.dim
    scale = dt * aii

    def residual(g):
        return g - r - scale * prob.rhs(ti, g)

    def jac_solve(g, res):
        if prob.jacobian is not None:
            J = _to_operator(prob.jacobian(ti, g), m)
        else:
            J = fd_jacobian(prob.rhs, ti, g)
        J = J.astype(prob.dtype)
        M = _shifted(J, float(scale), m, prob.dtype)
        rb = np.asarray(res).astype(prob.dtype)
        if sp.issparse(M):
            delta = spla.spsolve(M.tocsc(), rb)
        else:
            delta = np.linalg.solve(M, rb)
        return delta.astype(res.dtype, copy=False)

    g, _ = newton_solve(residual, jac_solve, guess, tol, max_iter, state.stats, stage=i + 1)
    return g


def step(
    t: Tableau,
    p: IvpProblem,
    state: StepperState,
    dt: float,
    tol: float = NEWTON_TOL,
    max_iter: int = NEWTON_MAX_ITER,
    use_affine: bool = True,
    precision: str = "double",
) -> StepperState:
    """Advance ``state`` by one step of size ``dt``.

    ``precision="extended"`` carries the state and all stage arithmetic in
    long double while linear solves stay in double (iterative refinement for
    affine stages, Newton corrections otherwise).  Schemes whose ``A^{-1}``
    has large entries otherwise lose many digits on stiff operators.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if precision not in ("double", "extended"):
        raise ValueError("precision must be 'double' or 'extended'")
    s = t.s
    affine = use_affine and p.affine is not None
    ext = precision == "extended"
    if ext:
        A = t.A.astype(np.longdouble)
        c = t.c.astype(np.longdouble)
        b = t.b.astype(np.longdouble)
        dt = np.longdouble(dt)
        u = np.asarray(state.u_n).astype(_ext_dtype(p))
        t_n = np.longdouble(state.t_n)
    else:
        A, c, b = t.A, t.c, t.b
        u = state.u_n
        t_n = state.t_n
    F = np.empty((s, p.dim), dtype=np.result_type(u, p.dtype))
    stats = replace(state.stats)
    new = StepperState(state.t_n, u, stats, state.cache)
    g_prev = u
    g = u
    for i in range(s):
        ti = t_n + c[i] * dt
        r = u + dt * (A[i, :i] @ F[:i]) if i else u.copy()
        aii = A[i, i]
        if aii == 0.0:
            g = r
            F[i] = p.rhs(ti, g)
        else:
            if affine:
                g = _affine_stage(t, p, new, dt, i, ti, r, aii, refine=3 if ext else 0)
            else:
                g = _newton_stage(t, p, new, dt, i, ti, r, aii, g_prev, tol, max_iter)
            F[i] = (g - r) / (dt * aii)
        g_prev = g
    if t.stiffly_accurate:
        u_next = g
    else:
        u_next = u + dt * (b @ F)
    new.t_n = state.t_n + float(dt)
    new.u_n = u_next
    return new


@dataclass
class IntegrationResult:
    state: StepperState
    err_u: Optional[float] = None
    err_ux: Optional[float] = None


def integrate(
    t: Tableau,
    p: IvpProblem,
    dt: float,
    n_steps: int,
    use_affine: bool = True,
    tol: float = NEWTON_TOL,
    max_iter: int = NEWTON_MAX_ITER,
    precision: str = "double",
) -> IntegrationResult:
    """March ``n_steps`` fixed steps and measure max-norm errors at the end."""
    t0, T = p.t_span
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    if n_steps * dt > (T - t0) * (1 + 1e-12) + 1e-14:
        raise ValueError("n_steps * dt exceeds the time span")
    state = StepperState(t0, p.u0.copy())
    for n in range(n_steps):
        state = step(
            t, p, state, dt, tol=tol, max_iter=max_iter, use_affine=use_affine,
            precision=precision,
        )
        # avoid drift from repeated addition
        state.t_n = t0 + (n + 1) * dt
    res = IntegrationResult(state)
    if p.exact is not None:
        res.err_u = float(np.abs(state.u_n - p.exact(state.t_n)).max())
    # report the state in the problem's working precision
    state.u_n = np.asarray(state.u_n).astype(p.dtype)
    if p.exact_dx is not None and p.derivative is not None:
        diff = np.abs(p.derivative(state.t_n, state.u_n) - p.exact_dx(state.t_n))
        if diff.ndim == 2:
            # gradient components along axis 0: pointwise Euclidean length
            diff = np.sqrt((diff**2).sum(axis=0))
        res.err_ux = float(diff.max())
    return res

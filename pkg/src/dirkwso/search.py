"""Construction and local optimization of DIRK schemes with high weak stage order.

The construction works on the branch ``dim K_q = 2`` with distinct leading
diagonal entries.  Unknowns are the lower triangle of ``A`` together with two
eigenvectors ``w1``, ``w2`` (``A w1 = a11 w1``, ``A w2 = a22 w2``) and the
coordinates ``beta1^(k)``, ``beta2^(k)`` of ``tau^(k)`` in that basis.  Stiff
accuracy is built in (``b`` is the last row of ``A``), and ``b`` is made
orthogonal to ``w1`` and ``w2``.

Pipeline per restart:

* :func:`step1a` builds the leading 3x3 block in closed form, solves rows
  ``4 .. s-1`` one at a time and finally the last row together with the
  retained order conditions;
* :func:`step1b` drives the full equality system to machine precision by
  Gauss-Newton;
* :func:`step1c` adds the inequalities (non-negative abscissae and
  diagonal, ``|R(iy)| <= 1`` on a grid, coefficient bound) with an
  augmented-Lagrangian loop;
* :func:`optimize_M` lowers the objective ``F`` (squared residuals of the
  order ``p + 1`` conditions) while keeping every constraint.

All residual maps are polynomial (or rational) in the unknowns and are
evaluated in batches, so Jacobians come from a single complex-step
evaluation.  None of the residual code is shared with the verifiers in
:mod:`conditions`, :mod:`wso` and :mod:`stability`, which re-check every
emitted candidate.
"""
from __future__ import annotations

import copy
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from .tableau import Tableau, from_text, reduce_confluent, to_text

CS_STEP = 1e-30
ROW_TOL = 1e-10
# imaginary-axis sample points y > 0 for |R(iy)| <= 1 (y = 0 holds trivially)
CR6_SEARCH_GRID = np.logspace(-2, 3, 400)
# dense check between the constraint points: tan-mapped midpoints of (0, pi/2)
_DENSE_N = 20_000
DENSE_AXIS = np.tan((np.arange(_DENSE_N) + 0.5) * (np.pi / 2 / _DENSE_N))


class SearchError(RuntimeError):
    """A pipeline stage failed for the current restart."""


# --------------------------------------------------------------------------
# Configuration and candidates
# --------------------------------------------------------------------------


@dataclass
class SearchConfig:
    """Target triple and solver settings.

    ``cr6_samples`` are the points ``y > 0`` where ``|R(iy)| <= 1`` is
    imposed during the search (``y = 0`` holds trivially).
    """

    s: int
    p: int
    q: int
    restarts: int = 100
    rng_seed: int = 0
    coeff_bound: float = 20.0
    eq_tol: float = 1e-10
    cr6_samples: np.ndarray = field(default_factory=lambda: CR6_SEARCH_GRID.copy())
    gn_tol: float = 1e-14
    gn_max_iter: int = 50
    al_outer: int = 10
    al_inner: int = 25
    opt_max_iter: int = 150
    diag_range: tuple = (0.01, 1.5)
    diag_sep: float = 1e-3
    draws_per_restart: int = 40
    row_attempts: int = 8
    stability_tol: float = 1e-8

    def __post_init__(self):
        sigma = 1  # stiff accuracy is always imposed
        if self.p not in (4, 5):
            raise ValueError("p must be 4 or 5")
        if self.q not in (4, 5):
            raise ValueError("q must be 4 or 5 (the dim K_q = 2 construction)")
        if self.s < self.p + 1 + sigma:
            raise ValueError(
                f"s = {self.s} is below the stage bound s >= p + 2 = {self.p + 2}"
            )
        if self.s < 4:
            raise ValueError("s must be at least 4")
        if self.restarts < 0:
            raise ValueError("restarts must be >= 0")
        self.cr6_samples = np.asarray(self.cr6_samples, dtype=float)

    @property
    def triple(self) -> tuple:
        return (self.s, self.p, self.q)


@dataclass
class Candidate:
    tableau: Tableau
    w1: np.ndarray
    w2: np.ndarray
    betas: np.ndarray  # shape (q - 1, 2), rows k = 2..q
    eq_residual: float
    feasible: bool = False
    F_value: float = math.nan
    x: Optional[np.ndarray] = field(default=None, repr=False)
    restart: int = -1
    flags: list = field(default_factory=list)

    @property
    def max_coeff(self) -> float:
        return float(np.abs(self.tableau.A).max())


# --------------------------------------------------------------------------
# Unknown layout and batched residual maps
# --------------------------------------------------------------------------


class _Layout:
    """Positions of the unknowns in the flat vector ``x``.

    ``x = [lower(A) row by row, w1[1:], w2[2:], beta1, beta2]`` with the
    normalizations ``w1[0] = 1``, ``w2[0] = 0``, ``w2[1] = 1``.
    """

    def __init__(self, s: int, q: int, p: int, y: np.ndarray, bound: float):
        self.s, self.q, self.p = s, q, p
        self.rows, self.cols = np.tril_indices(s)
        self.nA = self.rows.size
        self.iA = np.arange(self.nA)
        self.iw1 = self.nA + np.arange(s - 1)
        self.iw2 = self.iw1[-1] + 1 + np.arange(s - 2)
        self.ib1 = self.iw2[-1] + 1 + np.arange(q - 1)
        self.ib2 = self.ib1[-1] + 1 + np.arange(q - 1)
        self.n = self.ib2[-1] + 1
        self.y = np.asarray(y, dtype=float)
        self.base_y = self.y
        self.bound = bound
        self.trees = _trees(p + 1)
        # equation bookkeeping for the equality map
        pos = 0
        self.e_eig1 = np.arange(pos, pos + s - 1)  # rows 2..s
        pos += s - 1
        self.e_eig2 = np.arange(pos, pos + s - 2)  # rows 3..s
        pos += s - 2
        self.e_span = {}
        for k in range(2, q + 1):
            self.e_span[k] = np.arange(pos, pos + s)
            pos += s
        self.e_orth = np.arange(pos, pos + 2)
        pos += 2
        self.e_order = np.arange(pos, pos + len(_ORDER_TARGETS[p]))
        pos += len(_ORDER_TARGETS[p])
        self.m_eq = pos

    def entry(self, i: int, j: int) -> int:
        """Index of ``a_{i+1, j+1}`` (0-based ``i >= j``)."""
        return i * (i + 1) // 2 + j

    def row_unknowns(self, i: int) -> np.ndarray:
        """Unknowns attached to 0-based row ``i``: the row of A, w1_i, w2_i."""
        idx = [self.entry(i, j) for j in range(i + 1)]
        if i >= 1:
            idx.append(self.iw1[i - 1])
        if i >= 2:
            idx.append(self.iw2[i - 2])
        return np.array(idx)

    def row_equations(self, i: int) -> np.ndarray:
        idx = []
        if i >= 1:
            idx.append(self.e_eig1[i - 1])
        if i >= 2:
            idx.append(self.e_eig2[i - 2])
        for k in range(2, self.q + 1):
            idx.append(self.e_span[k][i])
        return np.array(idx)

    def unpack(self, x):
        x = np.asarray(x)
        batch = x.shape[:-1]
        s = self.s
        A = np.zeros(batch + (s, s), dtype=x.dtype)
        A[..., self.rows, self.cols] = x[..., self.iA]
        w1 = np.concatenate([np.ones(batch + (1,), dtype=x.dtype), x[..., self.iw1]], axis=-1)
        w2 = np.concatenate(
            [np.zeros(batch + (1,), dtype=x.dtype), np.ones(batch + (1,), dtype=x.dtype), x[..., self.iw2]],
            axis=-1,
        )
        return A, w1, w2, x[..., self.ib1], x[..., self.ib2]

    def pack(self, A, w1, w2, beta1, beta2) -> np.ndarray:
        x = np.empty(self.n)
        x[self.iA] = np.asarray(A)[self.rows, self.cols]
        x[self.iw1] = w1[1:]
        x[self.iw2] = w2[2:]
        x[self.ib1] = beta1
        x[self.ib2] = beta2
        return x


def _mv(A, v):
    return np.einsum("...ij,...j->...i", A, v)


def _dot(u, v):
    return (u * v).sum(axis=-1)


# Retained order conditions: (functional name, target).  Together with the
# WSO equations and stiff accuracy they imply order p.
_ORDER_TARGETS = {
    4: [("e", 1.0), ("c", 1 / 2), ("c2", 1 / 3), ("c3", 1 / 4), ("CAc", 1 / 8)],
}
_ORDER_TARGETS[5] = _ORDER_TARGETS[4] + [
    ("c4", 1 / 5),
    ("C2Ac", 1 / 10),
    ("CAc2", 1 / 15),
    ("AcAc", 1 / 20),
    ("CA2c", 1 / 30),
    ("ACAc", 1 / 40),
]


def _order_functionals(A, b, c, p):
    Ac = _mv(A, c)
    vals = {
        "e": b.sum(axis=-1),
        "c": _dot(b, c),
        "c2": _dot(b, c**2),
        "c3": _dot(b, c**3),
        "CAc": _dot(b, c * Ac),
    }
    if p >= 5:
        vals.update(
            c4=_dot(b, c**4),
            C2Ac=_dot(b, c * c * Ac),
            CAc2=_dot(b, c * _mv(A, c**2)),
            AcAc=_dot(b, Ac * Ac),
            CA2c=_dot(b, c * _mv(A, Ac)),
            ACAc=_dot(b, _mv(A, c * Ac)),
        )
    return [vals[name] - target for name, target in _ORDER_TARGETS[p]]


def eq_residual(x, lay: _Layout):
    """Stacked equality residuals (batched over leading axes of ``x``)."""
    A, w1, w2, be1, be2 = lay.unpack(x)
    c = A.sum(axis=-1)
    b = A[..., -1, :]
    d1 = A[..., 0, 0][..., None]
    d2 = A[..., 1, 1][..., None]
    parts = [(_mv(A, w1) - d1 * w1)[..., 1:], (_mv(A, w2) - d2 * w2)[..., 2:]]
    for k in range(2, lay.q + 1):
        tau = _mv(A, c ** (k - 1)) - c**k / k
        parts.append(tau - be1[..., k - 2, None] * w1 - be2[..., k - 2, None] * w2)
    parts.append(np.stack([_dot(b, w1), _dot(b, w2)], axis=-1))
    parts.append(np.stack(_order_functionals(A, b, c, lay.p), axis=-1))
    return np.concatenate(parts, axis=-1)


def _char_coeffs(M):
    """Coefficients ``k = 0..s`` of ``det(I - z M)`` (Faddeev-LeVerrier)."""
    s = M.shape[-1]
    eye = np.eye(s)
    coeffs = [np.ones(M.shape[:-2], dtype=M.dtype)]
    Mk = np.zeros_like(M)
    for k in range(1, s + 1):
        Mk = M @ Mk + coeffs[-1][..., None, None] * eye
        coeffs.append(-np.trace(M @ Mk, axis1=-2, axis2=-1) / k)
    return np.stack(coeffs, axis=-1)


def _abs2_on_imag_axis(coef, y):
    """``|f(iy)|^2`` for a real polynomial ``f`` with coefficients ``coef``."""
    deg = coef.shape[-1] - 1
    k = np.arange(deg + 1)
    # real part takes even powers, imaginary part odd powers of y
    powers = y[:, None] ** k  # (m, deg+1)
    sign_re = np.where(k % 2 == 0, (-1.0) ** (k // 2), 0.0)
    sign_im = np.where(k % 2 == 1, (-1.0) ** (k // 2), 0.0)
    re = np.einsum("...k,mk->...m", coef, powers * sign_re)
    im = np.einsum("...k,mk->...m", coef, powers * sign_im)
    return re * re + im * im


def stability_margin(A, b, y):
    """``1 - |R(iy)|^2`` on the grid ``y`` (batched over ``A``)."""
    s = A.shape[-1]
    M = A - np.ones(s)[:, None] * b[..., None, :]
    num = _abs2_on_imag_axis(_char_coeffs(M), y)
    den_coef = _char_coeffs(A)  # det(I - zA) = prod(1 - a_ii z)
    den = _abs2_on_imag_axis(den_coef, y)
    return 1.0 - num / den


def ineq_residual(x, lay: _Layout):
    """Inequalities ``g(x) >= 0``: abscissae, diagonal, ``|R(iy)|``, bound."""
    A, *_ = lay.unpack(x)
    c = A.sum(axis=-1)
    diag = np.diagonal(A, axis1=-2, axis2=-1)
    stab = stability_margin(A, A[..., -1, :], lay.y)
    coeffs = x[..., lay.iA]
    return np.concatenate([c, diag, stab, lay.bound**2 - coeffs**2], axis=-1)


def _ineq_tolerances(lay: _Layout, stability_tol: float) -> np.ndarray:
    s, m = lay.s, lay.y.size
    return np.concatenate(
        [np.zeros(2 * s), np.full(m, -stability_tol), np.zeros(lay.nA)]
    )


# Rooted trees, generated independently of the verifier's enumeration.


def _trees(n: int) -> list:
    """Rooted trees with ``n`` vertices as canonical nested tuples."""
    cache: dict[int, list] = {1: [()]}

    def trees(m):
        if m not in cache:
            out = set()
            for forest in forests(m - 1):
                out.add(tuple(sorted(forest)))
            cache[m] = sorted(out)
        return cache[m]

    def forests(m):
        if m == 0:
            return [()]
        res = []
        for k in range(1, m + 1):
            for t in trees(k):
                for rest in forests(m - k):
                    res.append((t,) + rest)
        return res

    return trees(n)


def _size(tree) -> int:
    return 1 + sum(_size(ch) for ch in tree)


def _gamma(tree) -> int:
    return _size(tree) * math.prod(_gamma(ch) for ch in tree)


def _weights(A, tree):
    v = np.ones(A.shape[:-1], dtype=A.dtype)
    for ch in tree:
        v = v * _mv(A, _weights(A, ch))
    return v


def objective_residual(x, lay: _Layout):
    """Residuals of the order ``p + 1`` conditions; ``F`` is their squared norm."""
    A, *_ = lay.unpack(x)
    b = A[..., -1, :]
    return np.stack([_dot(b, _weights(A, t)) - 1.0 / _gamma(t) for t in lay.trees], axis=-1)


def objective_of(t: Tableau, p: int) -> float:
    """``F`` for an arbitrary tableau via the search's own tree code."""
    trees = _trees(p + 1)
    A = np.asarray(t.A, dtype=float)
    b = np.asarray(t.b, dtype=float)
    r = np.array([_dot(b, _weights(A, tr)) - 1.0 / _gamma(tr) for tr in trees])
    return float(r @ r)


# --------------------------------------------------------------------------
# Generic solvers
# --------------------------------------------------------------------------


def cs_jacobian(fun, x: np.ndarray, h: float = CS_STEP):
    """Value and Jacobian of a batched real-analytic map by complex step."""
    x = np.asarray(x, dtype=float)
    n = x.size
    X = x[None, :] + 1j * h * np.eye(n)
    vals = fun(X)
    f0 = vals.real[0] if n else fun(x)
    J = (vals.imag / h).T
    return np.asarray(f0, dtype=float), J


def _gauss_newton(fun, x0, tol, max_iter, bound=None):
    """Minimum-norm Gauss-Newton with step halving on ``|f|_2``.

    Stops once ``|f|_inf <= tol``.  Returns the last accepted iterate and its
    ``|f|_inf``.
    """
    x = np.array(x0, dtype=float)
    f, J = cs_jacobian(fun, x)
    ss = float(f @ f)
    res = float(np.abs(f).max()) if f.size else 0.0
    for _ in range(max_iter):
        if res <= tol or not np.isfinite(ss):
            break
        delta, *_ = np.linalg.lstsq(J, -f, rcond=None)
        step = 1.0
        improved = False
        for _ in range(10):
            xn = x + step * delta
            fn = fun(xn[None, :])[0].real
            sn = float(fn @ fn)
            if np.isfinite(sn) and sn < ss:
                improved = True
                break
            step *= 0.5
        if not improved:
            break
        x, ss, res = xn, sn, float(np.abs(fn).max())
        if bound is not None and np.abs(x).max() > bound:
            break
        f, J = cs_jacobian(fun, x)
    return x, res


def _sub_fun(fun, x_full, idx, eq_idx):
    """Restrict a batched map to the unknowns ``idx`` and outputs ``eq_idx``."""

    def g(u):
        u = np.asarray(u)
        X = np.broadcast_to(x_full, u.shape[:-1] + x_full.shape).astype(u.dtype)
        X[..., idx] = u
        return fun(X)[..., eq_idx]

    return g


# --------------------------------------------------------------------------
# Step 1A
# --------------------------------------------------------------------------


def leading_block(d1: float, d2: float, d3: float, branch: int):
    """Closed-form rows 1-3 of ``A`` for given diagonal entries.

    With ``d = (a11, a33)`` the abscissae ``c2``, ``c3`` are the two roots
    of ``k2 c^2 + k1 c + k0`` with
    ``k2 = d1^2 - 4 d1 d3 + 2 d3^2``,
    ``k1 = -4 d1^2 d3 + 20 d1 d3^2 - 12 d3^3``,
    ``k0 = 2 d1^2 d3^2 - 12 d1 d3^3 + 12 d3^4``;
    ``branch`` selects which root is ``c2``.  Then
    ``a32 = (c3 - d1)(d2 - d3) m(c3) / ((c2 - d1) m(c2))`` with
    ``m(c) = c (d1 - d3) - d1 d3 + 2 d3^2``, ``a21 = c2 - d2`` and
    ``a31 = c3 - a32 - d3``.  These solve the third row of the WSO
    equations for ``k = 2, 3, 4`` off the confluent branches
    ``c2 = c1``, ``c3 = c1`` and ``c2 = c3``.  Returns ``None`` when the
    roots are complex or a division degenerates.
    """
    k2 = d1 * d1 - 4 * d1 * d3 + 2 * d3 * d3
    k1 = -4 * d1 * d1 * d3 + 20 * d1 * d3 * d3 - 12 * d3**3
    k0 = 2 * d1 * d1 * d3 * d3 - 12 * d1 * d3**3 + 12 * d3**4
    if abs(k2) < 1e-12:
        return None
    disc = k1 * k1 - 4 * k2 * k0
    if disc <= 0:
        return None
    r = np.sort(np.roots([k2, k1, k0]).real)
    c2, c3 = (r[0], r[1]) if branch == 0 else (r[1], r[0])

    def m(c):
        return c * (d1 - d3) - d1 * d3 + 2 * d3 * d3

    den = (c2 - d1) * m(c2)
    if abs(den) < 1e-12 or abs(c3 - d1) < 1e-8 or abs(c2 - d1) < 1e-8:
        return None
    a32 = (c3 - d1) * (d2 - d3) * m(c3) / den
    a21 = c2 - d2
    a31 = c3 - a32 - d3
    return np.array([[d1, 0.0, 0.0], [a21, d2, 0.0], [a31, a32, d3]])


def _leading_basis(B3: np.ndarray, q: int):
    """Components 1-3 of ``w1``, ``w2`` and the betas from the 3x3 block."""
    d1, d2, d3 = np.diag(B3)
    a21, a31, a32 = B3[1, 0], B3[2, 0], B3[2, 1]
    w1 = np.array([1.0, a21 / (d1 - d2), (a31 + a32 * a21 / (d1 - d2)) / (d1 - d3)])
    w2 = np.array([0.0, 1.0, a32 / (d2 - d3)])
    c = B3.sum(axis=1)
    beta1 = np.empty(q - 1)
    beta2 = np.empty(q - 1)
    for k in range(2, q + 1):
        tau = B3 @ c ** (k - 1) - c**k / k
        beta1[k - 2] = tau[0]
        beta2[k - 2] = tau[1] - tau[0] * w1[1]
    return w1, w2, beta1, beta2


def _row3_residual(B3: np.ndarray, k: int) -> float:
    w1, w2, be1, be2 = _leading_basis(B3, k)
    c = B3.sum(axis=1)
    tau = B3 @ c ** (k - 1) - c**k / k
    return float(tau[2] - be1[-1] * w1[2] - be2[-1] * w2[2])


def _draw_diagonals(cfg: SearchConfig, rng, count: int) -> np.ndarray:
    lo, hi = cfg.diag_range
    while True:
        d = rng.uniform(lo, hi, size=count)
        gaps = np.abs(d[:, None] - d[None, :])[np.triu_indices(count, 1)]
        if gaps.size == 0 or gaps.min() > cfg.diag_sep:
            return d


def _leading_for_q5(cfg: SearchConfig, rng, d1: float, d2: float, branch: int):
    """Solve the row-3 ``tau^(5)`` equation for ``a33``; random root choice."""
    lo, hi = cfg.diag_range
    grid = np.linspace(lo, hi, 400)

    def f(d3):
        B3 = leading_block(d1, d2, d3, branch)
        if B3 is None:
            return math.nan
        return _row3_residual(B3, 5)

    vals = np.array([f(g) for g in grid])
    roots = []
    for i in range(grid.size - 1):
        a, b = vals[i], vals[i + 1]
        if np.isfinite(a) and np.isfinite(b) and a * b < 0:
            try:
                roots.append(brentq(f, grid[i], grid[i + 1], xtol=1e-15, rtol=4e-16))
            except ValueError:
                pass
    roots = [r for r in roots if min(abs(r - d1), abs(r - d2)) > cfg.diag_sep]
    if not roots:
        return None
    d3 = roots[rng.integers(len(roots))]
    B3 = leading_block(d1, d2, d3, branch)
    if B3 is None or abs(_row3_residual(B3, 5)) > 1e-12:
        return None
    return B3


def _equation_tail(lay: _Layout) -> np.ndarray:
    return np.concatenate([lay.e_orth, lay.e_order])


def _fill_row_guess(x, lay: _Layout, i: int, cfg: SearchConfig, rng):
    lo, hi = cfg.diag_range
    for j in range(i):
        x[lay.entry(i, j)] = rng.normal(0.0, 0.5)
    x[lay.entry(i, i)] = rng.uniform(lo, hi)
    A, w1, w2, *_ = lay.unpack(x)
    # eigenvector components consistent with the guessed row
    if i >= 1:
        den = A[0, 0] - A[i, i]
        x[lay.iw1[i - 1]] = (A[i, :i] @ w1[:i]) / den if abs(den) > 1e-8 else 0.0
    if i >= 2:
        den = A[1, 1] - A[i, i]
        x[lay.iw2[i - 2]] = (A[i, :i] @ w2[:i]) / den if abs(den) > 1e-8 else 0.0


def step1a(config: SearchConfig, rng) -> Candidate:
    """Random equality-feasible candidate (rows built in sequence).

    Raises :class:`SearchError` when ``draws_per_restart`` diagonal draws
    are used up or the final-row solve fails.
    """
    cfg = config
    s, q = cfg.s, cfg.q
    lay = _layout(cfg)

    def fun(X):
        return eq_residual(X, lay)

    for _ in range(cfg.draws_per_restart):
        branch = int(rng.integers(2))
        if q == 4:
            d1, d2, d3 = _draw_diagonals(cfg, rng, 3)
            B3 = leading_block(d1, d2, d3, branch)
        else:
            d1, d2 = _draw_diagonals(cfg, rng, 2)
            B3 = _leading_for_q5(cfg, rng, d1, d2, branch)
        if B3 is None or np.abs(B3).max() > cfg.coeff_bound:
            continue
        w1_3, w2_3, beta1, beta2 = _leading_basis(B3, q)
        x = np.zeros(lay.n)
        for i in range(3):
            for j in range(i + 1):
                x[lay.entry(i, j)] = B3[i, j]
        x[lay.iw1[:2]] = w1_3[1:]
        x[lay.iw2[0]] = w2_3[2]
        x[lay.ib1] = beta1
        x[lay.ib2] = beta2
        ok = True
        # (e): rows 4 .. s-1
        for i in range(3, s - 1):
            idx = lay.row_unknowns(i)
            eqs = lay.row_equations(i)
            solved = False
            for _ in range(cfg.row_attempts):
                _fill_row_guess(x, lay, i, cfg, rng)
                g = _sub_fun(fun, x, idx, eqs)
                u, res = _gauss_newton(g, x[idx], 1e-13, 40, bound=cfg.coeff_bound)
                row = u[: i + 1]
                if (
                    res <= ROW_TOL
                    and np.abs(row).max() <= cfg.coeff_bound
                    and row[-1] > 0.0
                    and row.sum() >= 0.0
                ):
                    x[idx] = u
                    solved = True
                    break
            if not solved:
                ok = False
                break
        if not ok:
            continue
        # (f): last row with the orthogonality and order conditions; rows
        # before it join the solve when the last row alone is overdetermined
        last_err = math.inf
        for extra in range(0, 3):
            rows = list(range(s - 1 - extra, s))
            if rows[0] < 3:
                break
            idx = np.concatenate([lay.row_unknowns(i) for i in rows])
            eqs = np.concatenate([lay.row_equations(i) for i in rows] + [_equation_tail(lay)])
            for _ in range(cfg.row_attempts):
                _fill_row_guess(x, lay, s - 1, cfg, rng)
                g = _sub_fun(fun, x, idx, eqs)
                u, res = _gauss_newton(g, x[idx], 1e-13, 60, bound=cfg.coeff_bound)
                last_err = min(last_err, res)
                if res <= ROW_TOL:
                    x[idx] = u
                    A = lay.unpack(x)[0]
                    if np.abs(A).max() <= cfg.coeff_bound:
                        return _candidate(x, lay)
        raise SearchError(f"last-row solve failed (best residual {last_err:.2e})")
    raise SearchError("no admissible leading block or interior rows within the draw budget")


# --------------------------------------------------------------------------
# Steps 1B, 1C and problem (M)
# --------------------------------------------------------------------------


def _layout(cfg: SearchConfig) -> _Layout:
    return _Layout(cfg.s, cfg.q, cfg.p, cfg.cr6_samples, cfg.coeff_bound)


def _candidate(x, lay: _Layout, label: str = "candidate") -> Candidate:
    A, w1, w2, be1, be2 = lay.unpack(x)
    A = np.array(A.real)
    t = Tableau(A, A[-1].copy(), label=label, source="search")
    r = eq_residual(x, lay)
    F = float(np.sum(objective_residual(x, lay) ** 2))
    return Candidate(
        tableau=t,
        w1=np.array(w1.real),
        w2=np.array(w2.real),
        betas=np.column_stack([be1, be2]),
        eq_residual=float(np.abs(r).max()),
        F_value=F,
        x=np.array(x, dtype=float),
    )


def _retag(c: Candidate, **kw) -> Candidate:
    for k, v in kw.items():
        setattr(c, k, v)
    return c


def step1b(c: Candidate, config: SearchConfig) -> Candidate:
    """Gauss-Newton on the full equality system (residual to ``gn_tol``)."""
    lay = _layout(config)

    def fun(X):
        return eq_residual(X, lay)

    x, res = _gauss_newton(fun, c.x, config.gn_tol, config.gn_max_iter)
    if res > c.eq_residual:
        x, res = c.x, c.eq_residual
    if res > config.eq_tol:
        raise SearchError(f"Gauss-Newton stagnated at {res:.2e}")
    return _retag(_candidate(x, lay), restart=c.restart)


def _dense_margin(x, lay: _Layout) -> np.ndarray:
    A, *_ = lay.unpack(x)
    return stability_margin(A, A[-1], DENSE_AXIS)


def _with_axis_minima(lay: _Layout, x) -> _Layout:
    """Copy of ``lay`` whose sample points also hold the dense local minima."""
    m = _dense_margin(x, lay)
    inner = (m[1:-1] <= m[:-2]) & (m[1:-1] <= m[2:])
    extra = DENSE_AXIS[1:-1][inner]
    out = copy.copy(lay)
    out.y = np.concatenate([lay.base_y, extra])
    return out


def _feasible(x, lay: _Layout, cfg: SearchConfig) -> bool:
    r = float(np.abs(eq_residual(x, lay)).max())
    if r > cfg.eq_tol:
        return False
    g = ineq_residual(x, lay)
    if not np.all(g >= _ineq_tolerances(lay, cfg.stability_tol)):
        return False
    return bool(_dense_margin(x, lay).min() >= -cfg.stability_tol)


def _ineq_targets(lay: _Layout) -> np.ndarray:
    # aim slightly inside the feasible set so the final polish stays feasible
    s, m = lay.s, lay.y.size
    return np.concatenate([np.full(2 * s, 1e-9), np.zeros(m), np.full(lay.nA, 1e-6)])


def step1c(c: Candidate, config: SearchConfig) -> Candidate:
    """Enforce the inequalities; augmented Lagrangian with inner Gauss-Newton."""
    cfg = config
    lay = _layout(cfg)
    x = np.array(c.x, dtype=float)
    if _feasible(x, lay, cfg):
        return _retag(_candidate(x, lay), feasible=True, restart=c.restart)
    s, mb = lay.s, lay.base_y.size
    lam = np.zeros(2 * s + mb + lay.nA)
    mu = 10.0
    for _ in range(cfg.al_outer):
        # constraint points: the fixed grid plus the current dense minima
        lk = _with_axis_minima(lay, x)
        target = _ineq_targets(lk)
        n_extra = lk.y.size - mb
        split = 2 * s + mb
        lam_full = np.concatenate([lam[:split], np.zeros(n_extra), lam[split:]])
        lam_mu = lam_full / mu

        def stacked(X, lam_mu=lam_mu, mu=mu, lk=lk, target=target):
            r = eq_residual(X, lk)
            g = ineq_residual(X, lk) - target
            return np.concatenate([r, math.sqrt(mu) * (lam_mu - g)], axis=-1)

        def fun(X, stacked=stacked):
            # hinge applied to the real part; the complex-step part follows
            # the active branch so the Jacobian is that of the active pieces
            v = stacked(X)
            m_eq = lay.m_eq
            active = v.real[..., m_eq:] > 0
            out = v.copy()
            out[..., m_eq:] = np.where(active, v[..., m_eq:], 0.0)
            return out

        x, _ = _gauss_newton(fun, x, 1e-15, cfg.al_inner)
        g = ineq_residual(x[None, :], lk)[0] - target
        lam_full = np.maximum(0.0, lam_full - mu * g)
        lam = np.concatenate([lam_full[:split], lam_full[split + n_extra:]])
        x, _ = _gauss_newton(lambda X: eq_residual(X, lay), x, cfg.gn_tol, cfg.gn_max_iter)
        if _feasible(x, lay, cfg):
            return _retag(_candidate(x, lay), feasible=True, restart=c.restart)
        mu *= 4.0
    raise SearchError("inequality constraints not met within the augmented-Lagrangian budget")


def _nullspace(J, rcond=1e-10):
    u, sv, vt = np.linalg.svd(J)
    rank = int(np.sum(sv > rcond * (sv[0] if sv.size else 1.0)))
    return vt[rank:].T, vt[:rank].T, sv[:rank], u[:, :rank]


def optimize_M(c: Candidate, config: SearchConfig) -> Candidate:
    """Lower ``F`` while keeping all constraints (flagged warm start on failure).

    Each iteration linearizes the equalities and takes a damped Gauss-Newton
    step for the stacked objective-plus-penalty residual inside their null
    space, then projects back onto the equalities.  A step is kept only if
    the result is feasible and ``F`` decreases.
    """
    cfg = config
    lay = _layout(cfg)
    if not c.feasible:
        raise ValueError("optimize_M needs a feasible warm start")
    x = np.array(c.x, dtype=float)
    F = float(np.sum(objective_residual(x[None, :], lay)[0] ** 2))
    mu = 1e3
    damp = 1e-3

    def eqf(X):
        return eq_residual(X, lay)

    for _ in range(cfg.opt_max_iter):
        lk = _with_axis_minima(lay, x)
        target = _ineq_targets(lk)

        def penalized(X, lk=lk, target=target):
            rho = objective_residual(X, lk)
            g = ineq_residual(X, lk) - target
            hinge = np.where(g.real < 0, g, 0.0)
            return np.concatenate([rho, math.sqrt(mu) * hinge], axis=-1)

        r_eq, J_eq = cs_jacobian(eqf, x)
        f_pen, J_pen = cs_jacobian(penalized, x)
        N, _, _, _ = _nullspace(J_eq)
        if N.shape[1] == 0:
            break
        JN = J_pen @ N
        H = JN.T @ JN
        gvec = JN.T @ f_pen
        accepted = False
        for _ in range(12):
            y = np.linalg.solve(H + damp * (np.trace(H) / H.shape[0] + 1e-300) * np.eye(H.shape[0]), -gvec)
            xt = x + N @ y
            xt, res = _gauss_newton(eqf, xt, cfg.gn_tol, 8)
            if res <= cfg.eq_tol and _feasible(xt, lay, cfg):
                Ft = float(np.sum(objective_residual(xt[None, :], lay)[0] ** 2))
                if Ft < F * (1 - 1e-12):
                    accepted = True
                    break
            damp *= 8.0
        if not accepted:
            break
        rel = (F - Ft) / max(F, 1e-300)
        x, F = xt, Ft
        damp = max(damp / 16.0, 1e-9)
        if rel < 1e-10:
            break
    x, _ = _gauss_newton(eqf, x, cfg.gn_tol, cfg.gn_max_iter)
    out = _candidate(x, lay)
    if not _feasible(x, lay, cfg) or out.F_value > c.F_value + 1e-14:
        return _retag(c, flags=c.flags + ["optimize_failed"])
    return _retag(out, feasible=True, restart=c.restart, flags=list(c.flags))


def pareto_select(pool: list) -> list:
    """Non-dominated candidates under ``(F, max |a_ij|)``, both minimized."""
    if not pool:
        raise ValueError("empty candidate pool")
    keys = [(c.F_value, c.max_coeff) for c in pool]
    out = []
    for i, (fi, mi) in enumerate(keys):
        dominated = any(
            (fj <= fi and mj <= mi) and (fj < fi or mj < mi)
            for j, (fj, mj) in enumerate(keys)
            if j != i
        )
        if not dominated:
            out.append(pool[i])
    return out


# --------------------------------------------------------------------------
# Independent verification and the restart loop
# --------------------------------------------------------------------------


@dataclass
class Verification:
    order: int
    wso: float
    dim_Kq: int
    min_poly_roots: np.ndarray
    roots_match: bool
    stiffly_accurate: bool
    nonneg_c: bool
    nonneg_diag: bool
    a_stable: bool
    max_imag_modulus: float
    irreducible: bool
    max_order_residual: float
    passed: bool


def verify_candidate(t: Tableau, p: int, q: int) -> Verification:
    """Re-check a tableau with the verifier modules only."""
    from . import conditions, stability, wso

    rep = conditions.report(t)
    kr = wso.wso_of(t)
    st = stability.check_a_stability(t, mode="fine")
    red = reduce_confluent(t)
    roots = np.asarray(kr.min_poly_roots)
    target = np.sort(np.array([t.A[0, 0], t.A[1, 1]]))
    roots_match = bool(
        roots.size == 2
        and np.allclose(np.sort(roots.real), target, atol=1e-6)
        and np.abs(roots.imag).max() <= 1e-6
    )
    max_res = max(rep.residuals_by_order[k] for k in range(1, p + 1))
    passed = (
        rep.order >= p
        and kr.q >= q
        and kr.dim_Kq == 2
        and roots_match
        and t.stiffly_accurate
        and bool(np.all(t.c >= 0))
        and bool(np.all(np.diag(t.A) >= 0))
        and st.a_stable
        and not red.reducible
    )
    return Verification(
        order=rep.order,
        wso=kr.q,
        dim_Kq=kr.dim_Kq,
        min_poly_roots=roots,
        roots_match=roots_match,
        stiffly_accurate=t.stiffly_accurate,
        nonneg_c=bool(np.all(t.c >= 0)),
        nonneg_diag=bool(np.all(np.diag(t.A) >= 0)),
        a_stable=st.a_stable,
        max_imag_modulus=st.max_imag_axis_modulus,
        irreducible=not red.reducible,
        max_order_residual=float(max_res),
        passed=bool(passed),
    )


def restart_rng(seed: int, k: int):
    """Independent stream for restart ``k`` (order-independent)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,)))


def run_restart(config: SearchConfig, k: int, optimize: bool = True):
    """One restart: 1A, 1B, 1C and optionally (M).  Returns (candidate, stage)."""
    rng = restart_rng(config.rng_seed, k)
    try:
        c = step1a(config, rng)
        c.restart = k
        c = step1b(c, config)
        c = step1c(c, config)
        if optimize:
            c = optimize_M(c, config)
    except SearchError as exc:
        return None, str(exc)
    except (np.linalg.LinAlgError, FloatingPointError, ValueError, ZeroDivisionError) as exc:
        return None, f"numerical failure: {exc}"
    label = f"dirk{config.s}{config.p}{config.q}-seed{config.rng_seed}-r{k:05d}"
    c.tableau = Tableau(c.tableau.A, c.tableau.b, label=label, source="search")
    return c, "ok"


@dataclass
class SearchResult:
    config: SearchConfig
    pool: list
    failures: dict
    elapsed: float

    def best(self) -> Optional[Candidate]:
        return min(self.pool, key=lambda c: c.F_value) if self.pool else None

    def pareto(self) -> list:
        return pareto_select(self.pool) if self.pool else []


def _candidate_files(out_dir: Path, k: int):
    return out_dir / f"candidate_{k:05d}.txt", out_dir / f"candidate_{k:05d}.json"


def save_candidate(c: Candidate, out_dir, verification: Optional[Verification] = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    txt, js = _candidate_files(out_dir, c.restart)
    txt.write_text(to_text(c.tableau))
    rec = {
        "restart": c.restart,
        "F": c.F_value,
        "eq_residual": c.eq_residual,
        "max_abs_coeff": c.max_coeff,
        "feasible": c.feasible,
        "flags": c.flags,
        "x": [repr(float(v)) for v in c.x],
    }
    if verification is not None:
        rec["verification"] = {
            k: (v.tolist() if isinstance(v, np.ndarray) else v)
            for k, v in verification.__dict__.items()
            if k != "min_poly_roots"
        }
        rec["verification"]["min_poly_roots"] = [
            [float(z.real), float(z.imag)] for z in verification.min_poly_roots
        ]
    js.write_text(json.dumps(rec, indent=1, sort_keys=True, default=float))
    return txt


def load_candidate(json_path, config: SearchConfig) -> Candidate:
    rec = json.loads(Path(json_path).read_text())
    lay = _layout(config)
    x = np.array([float(v) for v in rec["x"]])
    c = _candidate(x, lay)
    label = from_text(Path(json_path).with_suffix(".txt").read_text()).label
    c.tableau = Tableau(c.tableau.A, c.tableau.b, label=label, source="search")
    return _retag(c, feasible=rec["feasible"], restart=rec["restart"], flags=rec["flags"])


def _progress_path(out_dir: Path) -> Path:
    return out_dir / "progress.json"


def run_search(
    config: SearchConfig,
    out_dir=None,
    workers: Optional[int] = None,
    optimize: bool = True,
    verify: bool = True,
) -> SearchResult:
    """Run ``config.restarts`` restarts; checkpoint to ``out_dir`` if given.

    With a checkpoint directory, restarts already recorded in
    ``progress.json`` are skipped and their candidates reloaded, so an
    interrupted search resumes where it stopped.  ``workers`` (default from
    ``DIRKWSO_THREADS``, else 1) sets the number of worker processes.
    """
    t0 = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    done: dict[int, str] = {}
    pool: list[Candidate] = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        prog = _progress_path(out)
        if prog.exists():
            done = {int(k): v for k, v in json.loads(prog.read_text())["status"].items()}
            for k, status in done.items():
                if status == "ok":
                    pool.append(load_candidate(_candidate_files(out, k)[1], config))
    todo = [k for k in range(config.restarts) if k not in done]
    if workers is None:
        workers = int(os.environ.get("DIRKWSO_THREADS", "1") or 1)

    def record(k, cand, status):
        if cand is not None and verify:
            ver = verify_candidate(cand.tableau, config.p, config.q)
            if not ver.passed:
                status = "rejected by verifier"
                cand = None
        else:
            ver = None
        done[k] = status
        if cand is not None:
            pool.append(cand)
            if out is not None:
                save_candidate(cand, out, ver)
        if out is not None:
            _progress_path(out).write_text(
                json.dumps({"triple": list(config.triple), "seed": config.rng_seed,
                            "status": {str(i): done[i] for i in sorted(done)}}, indent=1)
            )

    if workers > 1 and len(todo) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as ex:
            futs = {k: ex.submit(run_restart, config, k, optimize) for k in todo}
            for k in todo:
                cand, status = futs[k].result()
                record(k, cand, status)
    else:
        for k in todo:
            cand, status = run_restart(config, k, optimize)
            record(k, cand, status)
    pool.sort(key=lambda c: c.restart)
    failures: dict[str, int] = {}
    for status in done.values():
        if status != "ok":
            key = status.split(" (")[0]
            failures[key] = failures.get(key, 0) + 1
    return SearchResult(config, pool, failures, time.perf_counter() - t0)

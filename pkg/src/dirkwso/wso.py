"""Stage-order residuals, the Krylov space K_q and weak stage order."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .stability import R, resolvent_solve
from .tableau import Tableau

WSO_TOL = 1e-8
RANK_TOL = 1e-10
MINPOLY_TOL = 1e-8
K_LIMIT = 12


@dataclass
class StageResiduals:
    tau: dict[int, np.ndarray] = field(default_factory=dict)


def stage_residuals(t: Tableau, K: int) -> StageResiduals:
    """``tau^(k) = A c^(k-1) - c^k / k`` for ``k = 1..K``."""
    if K < 1:
        raise ValueError("K must be >= 1")
    c = t.c
    return StageResiduals({k: t.A @ c ** (k - 1) - c**k / k for k in range(1, K + 1)})


def _tau(t: Tableau, k: int) -> np.ndarray:
    return t.A @ t.c ** (k - 1) - t.c**k / k


def _orthogonality_terms(t: Tableau, k: int):
    """(|b^T A^j tau^(k)|, scale) for j = 0..s-1."""
    tau = _tau(t, k)
    nb = np.abs(t.b).max()
    nA = np.abs(t.A).sum(axis=1).max()
    nt = np.abs(tau).max()
    v = tau
    out = []
    for j in range(t.s):
        out.append((abs(t.b @ v), max(1.0, nb * nA**j * nt)))
        v = t.A @ v
    return out


def _krylov_basis(t: Tableau, q: int, tol: float = RANK_TOL) -> np.ndarray:
    """Orthonormal basis of K_q via block Arnoldi with reorthogonalization.

    A candidate direction is accepted when its component outside the current
    basis exceeds ``tol`` relative to the candidate's scale: ``|tau^(k)|`` for
    a generator, ``|A|_2`` for an image ``A q_i`` of a unit basis vector.
    """
    s = t.s
    Q = np.zeros((s, 0))
    normA = np.linalg.norm(t.A, 2)

    def add(v, scale):
        nonlocal Q
        if scale == 0.0:
            return None
        for _ in range(2):
            v = v - Q @ (Q.T @ v)
        nv = np.linalg.norm(v)
        if nv <= tol * scale or Q.shape[1] >= s:
            return None
        qn = v / nv
        Q = np.column_stack([Q, qn])
        return qn

    for k in range(1, q + 1):
        tau = _tau(t, k)
        # tau^(1) is zero up to rounding of the row sums
        scale = np.linalg.norm(tau) if k > 1 else 0.0
        new = add(tau, scale)
        pending = [new] if new is not None else []
        while pending:
            qv = pending.pop()
            nxt = add(t.A @ qv, normA)
            if nxt is not None:
                pending.append(nxt)
    return Q


def _min_poly(B: np.ndarray, tol: float = MINPOLY_TOL) -> np.ndarray:
    """Monic coefficients (highest first) of the minimal polynomial of B."""
    d = B.shape[0]
    if d == 0:
        return np.array([1.0])
    powers = [np.eye(d).ravel()]
    P = np.eye(d)
    for m in range(1, d + 1):
        P = P @ B
        M = np.column_stack(powers)
        coef, *_ = np.linalg.lstsq(M, P.ravel(), rcond=None)
        resid = np.linalg.norm(M @ coef - P.ravel())
        if resid <= tol * max(1.0, np.linalg.norm(P)):
            # P(x) = x^m - sum coef_i x^i
            return np.concatenate([[1.0], -coef[::-1]])
        powers.append(P.ravel())
    raise AssertionError("characteristic polynomial always annihilates B")


@dataclass
class KrylovReport:
    q: float  # math.inf when WSO reaches the probe limit
    dim_Kq: int
    min_poly_degree: int
    min_poly_roots: np.ndarray
    orthogonality_residual: float
    invariance_residual: float = 0.0
    k_max: int = 0


def wso_of(t: Tableau, K_max: int | None = None) -> KrylovReport:
    """Weak stage order and the structure of K_q.

    ``q`` is the largest integer ``<= K_max`` with
    ``|b^T A^j tau^(k)| <= 1e-8 * max(1, |b| |A|^j |tau^(k)|)`` (infinity
    norms) for all ``0 <= j < s`` and ``k <= q``; it is reported as
    ``math.inf`` once it reaches ``K_max`` (default ``s + 6``).
    """
    if K_max is None:
        K_max = t.s + 6
    q = 0
    worst = 0.0
    while q < K_max:
        terms = _orthogonality_terms(t, q + 1)
        if any(v > WSO_TOL * sc for v, sc in terms):
            break
        q += 1
        worst = max(worst, max(v for v, _ in terms))
    q_eff = q
    Q = _krylov_basis(t, q_eff)
    d = Q.shape[1]
    B = Q.T @ t.A @ Q
    inv_res = float(np.abs(t.A @ Q - Q @ B).max()) if d else 0.0
    coeffs = _min_poly(B)
    roots = np.roots(coeffs) if coeffs.size > 1 else np.array([])
    return KrylovReport(
        q=math.inf if q >= K_max else q,
        dim_Kq=d,
        min_poly_degree=coeffs.size - 1,
        min_poly_roots=np.sort_complex(roots.astype(complex)),
        orthogonality_residual=worst,
        invariance_residual=inv_res,
        k_max=K_max,
    )


def verify_min_poly(t: Tableau, q: int) -> tuple[bool, float]:
    """Check that the expected minimal polynomial annihilates tau^(2..q).

    For ``q >= 4`` the polynomial is ``(x - a11)(x - a22)``.  For ``q <= 3``
    the degree-one analogue is tried with every diagonal entry and the best
    residual reported.
    """
    A = t.A
    eye = np.eye(t.s)
    taus = [_tau(t, k) for k in range(2, q + 1)]
    if not taus:
        return True, 0.0
    if q >= 4:
        if t.s < 2:
            return False, math.inf
        P = (A - A[0, 0] * eye) @ (A - A[1, 1] * eye)
        res = max(np.abs(P @ v).max() for v in taus)
    else:
        res = min(
            max(np.abs((A - lam * eye) @ v).max() for v in taus) for lam in np.diag(A)
        )
    return bool(res <= MINPOLY_TOL), float(res)


def transfer(t: Tableau, k: int, z):
    """``b^T (I - zA)^{-1} tau^(k)`` (vectorized over ``z``)."""
    z_arr = np.asarray(z, dtype=complex)
    x = resolvent_solve(t.A, z_arr, _tau(t, k))
    val = np.tensordot(t.b, x, axes=(0, 0))
    return complex(val) if val.ndim == 0 else val


def W(t: Tableau, k: int, z):
    """``k b^T (I - zA)^{-1} tau^(k) / (R(z) - 1)``."""
    num = k * np.asarray(transfer(t, k, z))
    den = np.asarray(R(t, z)) - 1.0
    if np.any(den == 0):
        raise ZeroDivisionError("R(z) = 1")
    val = num / den
    return complex(val) if np.ndim(val) == 0 else val

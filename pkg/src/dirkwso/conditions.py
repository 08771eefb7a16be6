"""Classical order conditions, simplifying assumptions and the error objective.

Condition identifiers:

* ``tree_<order>_<index>`` -- rooted-tree conditions.  Orders 1-5 follow the
  row order of the usual DIRK tabulation (tall tree first, then bushy tree,
  then the mixed ones); order 6 uses the canonical enumeration of
  :func:`rooted_trees`.
* ``phi_<l>_<k>`` -- ``b^T A^(l-k) c^k - k!/(l+1)!``.
* ``T<k>`` -- ``b^T A^(k-1) e - 1/k!``; ``B<k>`` -- ``b^T c^(k-1) - 1/k``.

``phi_l_0`` and ``phi_l_1`` coincide for ``l >= 1`` because ``c = Ae``.  The
condition ``b^T C A C c`` is the same functional as ``b^T C A c^2`` since
``C c = c^2``; only the latter is kept.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .tableau import Tableau

HOLD_TOL = 1e-8
MAX_ORDER = 6
XI_MAX = 12


def phi(t: Tableau, l: int, k: int) -> float:
    if not 0 <= k <= l:
        raise ValueError(f"need 0 <= k <= l, got l={l}, k={k}")
    v = t.c**k
    for _ in range(l - k):
        v = t.A @ v
    return float(t.b @ v - math.factorial(k) / math.factorial(l + 1))


def _table_functionals(A: np.ndarray, b: np.ndarray):
    """(order, value, target) for every tree of order <= 5, in table order."""
    c = A.sum(axis=1)
    e = np.ones_like(c)
    Ac = A @ c
    A2c = A @ Ac
    Ac2 = A @ c**2
    return [
        (1, b @ e, 1.0),
        (2, b @ c, 1 / 2),
        (3, b @ Ac, 1 / 6),
        (3, b @ c**2, 1 / 3),
        (4, b @ A2c, 1 / 24),
        (4, b @ c**3, 1 / 4),
        (4, b @ Ac2, 1 / 12),
        (4, b @ (c * Ac), 1 / 8),
        (5, b @ (A @ A2c), 1 / 120),
        (5, b @ c**4, 1 / 5),
        (5, b @ (A @ Ac2), 1 / 60),
        (5, b @ (c * c * Ac), 1 / 10),
        (5, b @ (c * Ac2), 1 / 15),
        (5, b @ (A @ c**3), 1 / 20),
        (5, b @ (c * A2c), 1 / 30),
        (5, b @ (A @ (c * Ac)), 1 / 40),
        (5, b @ (Ac * Ac), 1 / 20),
    ]


# --------------------------------------------------------------------------
# Generic rooted trees (used for order 6)
# --------------------------------------------------------------------------


@lru_cache(maxsize=None)
def rooted_trees(order: int) -> tuple:
    """All rooted trees with ``order`` vertices.

    A tree is the sorted tuple of its subtrees; the single vertex is ``()``.
    Each tree is produced once, as a multiset of subtrees drawn in
    non-decreasing position from the list of smaller trees.
    """
    if order == 1:
        return ((),)
    pool = [tr for m in range(1, order) for tr in rooted_trees(m)]
    found = []

    def extend(remaining, start, children):
        if remaining == 0:
            found.append(tuple(sorted(children)))
            return
        for idx in range(start, len(pool)):
            size = _tree_order(pool[idx])
            if size <= remaining:
                extend(remaining - size, idx, children + [pool[idx]])

    extend(order - 1, 0, [])
    return tuple(found)


def _tree_order(tree) -> int:
    return 1 + sum(_tree_order(ch) for ch in tree)


def _density(tree) -> int:
    g = _tree_order(tree)
    for ch in tree:
        g *= _density(ch)
    return g


def _weight_vector(A: np.ndarray, tree) -> np.ndarray:
    v = np.ones(A.shape[0])
    for ch in tree:
        v = v * (A @ _weight_vector(A, ch))
    return v


def tree_residual(t: Tableau, tree) -> float:
    return float(t.b @ _weight_vector(t.A, tree) - 1.0 / _density(tree))


# --------------------------------------------------------------------------
# Residual lists
# --------------------------------------------------------------------------


def order_residuals(t: Tableau, p: int) -> list[tuple[str, float]]:
    """Residuals (lhs - rhs) of every order condition of order <= ``p``."""
    if not 1 <= p <= MAX_ORDER:
        raise ValueError(f"p must be in 1..{MAX_ORDER}")
    out = []
    counts: dict[int, int] = {}
    for order, val, target in _table_functionals(t.A, t.b):
        if order > p:
            break
        counts[order] = counts.get(order, 0) + 1
        out.append((f"tree_{order}_{counts[order]}", float(val - target)))
    if p >= 6:
        for i, tree in enumerate(rooted_trees(6), start=1):
            out.append((f"tree_6_{i}", tree_residual(t, tree)))
    return out


def objective_F(t: Tableau, p: int) -> float:
    """Sum of squared residuals of the order ``p + 1`` conditions."""
    if not 1 <= p <= MAX_ORDER - 1:
        raise ValueError(f"p must be in 1..{MAX_ORDER - 1}")
    prefix = f"tree_{p + 1}_"
    return float(sum(r * r for cid, r in order_residuals(t, p + 1) if cid.startswith(prefix)))


# --------------------------------------------------------------------------
# Simplifying assumptions and stage order
# --------------------------------------------------------------------------


def stage_residual(t: Tableau, k: int) -> np.ndarray:
    return t.A @ t.c ** (k - 1) - t.c**k / k


def _holds_B(t, k, tol):
    return abs(t.b @ t.c ** (k - 1) - 1.0 / k) <= tol


def _holds_C(t, k, tol):
    return np.abs(stage_residual(t, k)).max() <= tol


def _holds_T(t, k, tol):
    v = np.ones(t.s)
    for _ in range(k - 1):
        v = t.A @ v
    return abs(t.b @ v - 1.0 / math.factorial(k)) <= tol


def _S_terms(t, xi):
    # b^T A^j tau^(k) for k > 0 and j + k < xi
    for k in range(1, xi):
        v = stage_residual(t, k)
        for j in range(0, xi - k):
            yield t.b @ v
            v = t.A @ v


def _largest(pred, start: int, xi_max: int) -> int:
    xi = start
    while xi < xi_max and pred(xi + 1):
        xi += 1
    return xi


@dataclass
class OrderReport:
    order: int
    residuals_by_order: dict[int, float] = field(default_factory=dict)
    stage_order: int = 0
    B_max: int = 0
    C_max: int = 0
    S_max: int = 0
    T_max: int = 0
    tol: float = HOLD_TOL


def report(t: Tableau, tol: float = HOLD_TOL, xi_max: int = XI_MAX) -> OrderReport:
    res = order_residuals(t, MAX_ORDER)
    by_order: dict[int, float] = {}
    for cid, r in res:
        o = int(cid.split("_")[1])
        by_order[o] = max(by_order.get(o, 0.0), abs(r))
    order = 0
    while order < MAX_ORDER and by_order[order + 1] <= tol:
        order += 1
    B_max = _largest(lambda k: _holds_B(t, k, tol), 0, xi_max)
    C_max = _largest(lambda k: _holds_C(t, k, tol), 0, xi_max)
    T_max = _largest(lambda k: _holds_T(t, k, tol), 0, xi_max)
    S_max = _largest(
        lambda xi: all(abs(v) <= tol for v in _S_terms(t, xi)), 1, xi_max
    )
    return OrderReport(
        order=order,
        residuals_by_order=by_order,
        stage_order=min(B_max, C_max),
        B_max=B_max,
        C_max=C_max,
        S_max=S_max,
        T_max=T_max,
        tol=tol,
    )


# --------------------------------------------------------------------------
# Redundancy bookkeeping for high weak stage order
# --------------------------------------------------------------------------

_KEPT_PHI = {
    3: ["phi_1_1", "phi_2_2"],
    4: ["phi_1_1", "phi_2_2", "phi_3_3"],
    5: ["phi_1_1", "phi_2_2", "phi_3_3", "phi_4_4"],
}
_REDUNDANT_PHI = {
    3: ["phi_2_1"],
    4: ["phi_2_1", "phi_3_2", "phi_3_1"],
    5: ["phi_2_1", "phi_3_2", "phi_4_3", "phi_3_1", "phi_4_2", "phi_4_1"],
}
# Trees that are not of the form b^T A^m c^k.
_ADDITIONAL = {
    3: [],
    4: ["tree_4_4"],
    5: ["tree_4_4", "tree_5_4", "tree_5_5", "tree_5_7", "tree_5_8", "tree_5_9"],
}
TABULATED = {(3, 2), (3, 3), (4, 3), (4, 4), (5, 4), (5, 5)}


def _check_tabulated(p, q):
    if (p, q) not in TABULATED:
        raise ValueError(f"(p, q) = ({p}, {q}) is not tabulated; choose from {sorted(TABULATED)}")


def retained_conditions(p: int, q: int) -> list[str]:
    """Order conditions kept when WSO ``q`` is imposed alongside order ``p``.

    Consistency (``phi_0_0``), the kept ``phi`` family and every tree that is
    not a ``phi`` functional.
    """
    _check_tabulated(p, q)
    return ["phi_0_0"] + _KEPT_PHI[p] + _ADDITIONAL[p]


def redundant_conditions(p: int, q: int) -> list[str]:
    _check_tabulated(p, q)
    return list(_REDUNDANT_PHI[p])


_ID_RE = re.compile(r"^(?:phi_(\d+)_(\d+)|tree_(\d+)_(\d+)|T(\d+)|B(\d+))$")


def condition_residual(t: Tableau, cid: str) -> float:
    m = _ID_RE.match(cid)
    if not m:
        raise ValueError(f"unknown condition id {cid!r}")
    if m.group(1) is not None:
        return phi(t, int(m.group(1)), int(m.group(2)))
    if m.group(3) is not None:
        order = int(m.group(3))
        for name, r in order_residuals(t, order):
            if name == cid:
                return r
        raise ValueError(f"unknown condition id {cid!r}")
    if m.group(5) is not None:
        k = int(m.group(5))
        return phi(t, k - 1, 0)
    k = int(m.group(6))
    return float(t.b @ t.c ** (k - 1) - 1.0 / k)

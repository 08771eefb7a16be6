"""Butcher tableaux for diagonally implicit Runge-Kutta schemes.

A :class:`Tableau` stores the coefficient matrix ``A`` and weights ``b``.  The
abscissae are always derived as the row sums of ``A`` and are never read from
input.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import _catalog

UPPER_TOL = 1e-14
CONFLUENCE_TOL = 1e-12


class TableauError(ValueError):
    """Raised for structurally invalid coefficient arrays."""


class TableauParseError(TableauError):
    """Raised when tableau text cannot be parsed.

    ``line`` and ``column`` are 1-based positions of the offending token.
    """

    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


def _frozen(x: np.ndarray) -> np.ndarray:
    x = np.array(x, dtype=float, copy=True)
    x.setflags(write=False)
    return x


@dataclass(frozen=True, eq=False)
class Tableau:
    A: np.ndarray
    b: np.ndarray
    label: str = "unnamed"
    source: str = "file"
    c: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        A = _frozen(self.A)
        b = _frozen(self.b)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", _frozen(A.sum(axis=1)))

    @property
    def s(self) -> int:
        return self.b.shape[0]

    @property
    def stiffly_accurate(self) -> bool:
        """True when the last row of A equals b exactly."""
        return bool(np.array_equal(self.A[-1], self.b))

    def __eq__(self, other):
        if not isinstance(other, Tableau):
            return NotImplemented
        return (
            self.label == other.label
            and np.array_equal(self.A, other.A)
            and np.array_equal(self.b, other.b)
        )

    def __hash__(self):
        return hash((self.label, self.A.tobytes(), self.b.tobytes()))

    def __repr__(self):
        return f"Tableau(label={self.label!r}, s={self.s}, source={self.source!r})"


def validate(raw_A, raw_b, label: str = "unnamed", source: str = "file") -> Tableau:
    """Check DIRK structure and build a :class:`Tableau`.

    Strictly-upper entries up to ``1e-14`` in magnitude are treated as zero;
    anything larger is rejected.
    """
    A = np.array(raw_A, dtype=float)
    b = np.array(raw_b, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise TableauError(f"A must be square, got shape {A.shape}")
    if b.ndim != 1 or b.shape[0] != A.shape[0]:
        raise TableauError(f"b has length {b.shape[0] if b.ndim else 0}, expected {A.shape[0]}")
    if A.shape[0] < 1:
        raise TableauError("tableau needs at least one stage")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise TableauError("non-finite coefficient")
    upper = np.triu(A, k=1)
    worst = np.abs(upper).max() if A.shape[0] > 1 else 0.0
    if worst > UPPER_TOL:
        i, j = np.unravel_index(np.argmax(np.abs(upper)), A.shape)
        raise TableauError(
            f"A is not lower triangular: a[{i + 1},{j + 1}] = {A[i, j]!r}"
        )
    A = np.tril(A)
    return Tableau(A, b, label=label, source=source)


def _from_rows(rows, label, source, b=None) -> Tableau:
    s = len(rows)
    A = np.zeros((s, s))
    for i, row in enumerate(rows):
        A[i, : len(row)] = [float(Fraction(v)) if isinstance(v, str) and "/" in v else float(v) for v in row]
    if b is None:
        b = A[-1].copy()
    else:
        b = np.array([float(Fraction(v)) if isinstance(v, str) else float(v) for v in b])
    return validate(A, b, label=label, source=source)


# Hairer & Wanner, Solving ODEs II, Table IV.6.5 (SDIRK, gamma = 1/4).
_HW_SDIRK54 = (
    ("1/4",),
    ("1/2", "1/4"),
    ("17/50", "-1/25", "1/4"),
    ("371/1360", "-137/2720", "15/544", "1/4"),
    ("25/24", "-49/48", "125/16", "-85/12", "1/4"),
)

_BUILTINS = {
    "dirk744": lambda: _from_rows(_catalog.DIRK744_ROWS, "dirk744", "builtin"),
    "dirk1254": lambda: _from_rows(_catalog.DIRK1254_ROWS, "dirk1254", "builtin"),
    "dirk1255": lambda: _from_rows(_catalog.DIRK1255_ROWS, "dirk1255", "builtin"),
    "dirk541": lambda: _from_rows(
        _HW_SDIRK54,
        "dirk541",
        "builtin (transcribed: Hairer-Wanner II, Table IV.6.5)",
    ),
    "dirk551": lambda: _from_rows(
        _catalog.DIRK551_ROWS,
        "dirk551",
        _catalog.DIRK551_SOURCE,
        b=_catalog.DIRK551_B,
    ),
    "backward_euler": lambda: validate([[1.0]], [1.0], "backward_euler", "builtin"),
    "crank_nicolson_dirk": lambda: validate(
        [[0.0, 0.0], [0.5, 0.5]], [0.5, 0.5], "crank_nicolson_dirk", "builtin"
    ),
}


def builtin_names() -> list[str]:
    return list(_BUILTINS)


def builtin(name: str) -> Tableau:
    """Return a built-in tableau by name (see :func:`builtin_names`)."""
    try:
        make = _BUILTINS[name]
    except KeyError:
        raise KeyError(
            f"unknown scheme {name!r}; choose from {', '.join(_BUILTINS)}"
        ) from None
    return make()


# --------------------------------------------------------------------------
# Confluent-stage reduction
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ReductionReport:
    reducible: bool
    r: int
    reduced: Tableau | None = None


def reduce_confluent(t: Tableau, tol: float = CONFLUENCE_TOL) -> ReductionReport:
    """Merge leading stages whose abscissae coincide.

    If ``c_1 = ... = c_r`` for a maximal ``r >= 2``, the leading ``r`` stages
    produce identical stage values and are replaced by one stage with diagonal
    entry ``a_11``; the coupling column becomes the row sums of the
    corresponding block and the merged weight is the sum of the merged weights.
    """
    c = t.c
    r = 1
    while r < t.s and abs(c[r] - c[0]) <= tol:
        r += 1
    if r < 2:
        return ReductionReport(False, 1, None)
    s_new = t.s - r + 1
    A = np.zeros((s_new, s_new))
    A[0, 0] = t.A[0, 0]
    A[1:, 0] = t.A[r:, :r].sum(axis=1)
    A[1:, 1:] = t.A[r:, r:]
    b = np.empty(s_new)
    b[0] = t.b[:r].sum()
    b[1:] = t.b[r:]
    reduced = Tableau(A, b, label=f"{t.label}-reduced", source="reduced")
    return ReductionReport(True, r, reduced)


# --------------------------------------------------------------------------
# Text and CSV forms
# --------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return "%.16e" % x


def to_text(t: Tableau) -> str:
    """Serialize to the line-oriented tableau format.

    Layout: ``s <int>``, ``label <text>``, comment lines, one row of A per
    line (lower triangle only), then ``b`` followed by the weights.  The
    abscissae appear only in a comment.
    """
    out = [f"s {t.s}", f"label {t.label}", f"# source {t.source}"]
    out.append("# c " + " ".join(_fmt(v) for v in t.c))
    for i in range(t.s):
        out.append(" ".join(_fmt(v) for v in t.A[i, : i + 1]))
    out.append("b " + " ".join(_fmt(v) for v in t.b))
    return "\n".join(out) + "\n"


def _parse_float(tok: str, line: int, col: int) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise TableauParseError(f"expected a number, got {tok!r}", line, col) from None
    if not math.isfinite(v):
        raise TableauParseError(f"non-finite value {tok!r}", line, col)
    return v


def _tokens(line: str):
    col = 0
    for tok in line.split():
        col = line.index(tok, col)
        yield tok, col + 1
        col += len(tok)


def from_text(text: str, source: str = "file") -> Tableau:
    """Parse the format written by :func:`to_text`."""
    lines = [
        (n, ln)
        for n, ln in enumerate(text.splitlines(), start=1)
        if ln.strip() and not ln.lstrip().startswith("#")
    ]
    if not lines:
        raise TableauParseError("empty input", 1)
    n, ln = lines[0]
    toks = list(_tokens(ln))
    if len(toks) != 2 or toks[0][0] != "s":
        raise TableauParseError("first line must be 's <int>'", n)
    try:
        s = int(toks[1][0])
    except ValueError:
        raise TableauParseError(f"bad stage count {toks[1][0]!r}", n, toks[1][1]) from None
    if s < 1:
        raise TableauParseError("stage count must be positive", n, toks[1][1])
    if len(lines) < 2:
        raise TableauParseError("missing 'label' line", n + 1)
    n, ln = lines[1]
    stripped = ln.strip()
    if not (stripped == "label" or stripped.startswith("label ")):
        raise TableauParseError("second line must be 'label <text>'", n)
    label = stripped[5:].strip() or "unnamed"
    body = lines[2:]
    if len(body) != s + 1:
        last = body[-1][0] if body else n
        raise TableauParseError(f"expected {s} rows of A and a 'b' line, found {len(body)} lines", last)
    A = np.zeros((s, s))
    for i, (n, ln) in enumerate(body[:s]):
        toks = list(_tokens(ln))
        if len(toks) != i + 1:
            raise TableauParseError(f"row {i + 1} of A needs {i + 1} entries, found {len(toks)}", n)
        for j, (tok, col) in enumerate(toks):
            A[i, j] = _parse_float(tok, n, col)
    n, ln = body[s]
    toks = list(_tokens(ln))
    if not toks or toks[0][0] != "b":
        raise TableauParseError("expected 'b' line", n)
    if len(toks) != s + 1:
        raise TableauParseError(f"'b' line needs {s} entries, found {len(toks) - 1}", n)
    b = np.array([_parse_float(tok, n, col) for tok, col in toks[1:]])
    return validate(A, b, label=label, source=source)


def to_csv(t: Tableau) -> str:
    """CSV of ``i,j,value`` triples (1-based); weights use row ``i = s + 1``."""
    buf = io.StringIO()
    buf.write("i,j,value\n")
    for i in range(t.s):
        for j in range(i + 1):
            buf.write(f"{i + 1},{j + 1},{_fmt(t.A[i, j])}\n")
    for j in range(t.s):
        buf.write(f"{t.s + 1},{j + 1},{_fmt(t.b[j])}\n")
    return buf.getvalue()

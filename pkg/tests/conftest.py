"""Shared fixtures and the acceptance summary printed after the run."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dirkwso import tableau

settings.register_profile(
    "dirkwso", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("dirkwso")

NEW_SCHEMES = ("dirk744", "dirk1254", "dirk1255")
TRIPLES = {"dirk744": (7, 4, 4), "dirk1254": (12, 5, 4), "dirk1255": (12, 5, 5)}

# criterion number -> list of (check name, passed, detail)
ACCEPTANCE: dict[int, list] = {}


def record(criterion: int, name: str, passed: bool, detail: str = "") -> bool:
    ACCEPTANCE.setdefault(criterion, []).append((name, bool(passed), detail))
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        checks = ACCEPTANCE[k]
        ok = all(p for _, p, _ in checks)
        tr.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}")
        for name, passed, detail in checks:
            tr.write_line(f"    [{'pass' if passed else 'FAIL'}] {name} {detail}")


@pytest.fixture(scope="session")
def builtins():
    return {name: tableau.builtin(name) for name in tableau.builtin_names()}


def random_dirk(rng, s: int, scale: float = 1.0, stiffly_accurate: bool = False):
    """A random lower-triangular tableau with positive diagonal."""
    A = np.tril(rng.uniform(-scale, scale, size=(s, s)))
    A[np.diag_indices(s)] = rng.uniform(0.1, 1.0, size=s)
    b = A[-1].copy() if stiffly_accurate else rng.uniform(-1, 1, size=s)
    return tableau.validate(A, b, label="random", source="test")

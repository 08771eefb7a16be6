import json
from types import SimpleNamespace

import numpy as np
import pytest

from dirkwso import conditions, search, stability, tableau, wso
from dirkwso.search import SearchConfig

CFG = SearchConfig(7, 4, 4)
GOOD_RESTART = 60  # a seed-0 restart that survives the whole pipeline


@pytest.fixture(scope="module")
def stages():
    rng = search.restart_rng(CFG.rng_seed, GOOD_RESTART)
    a = search.step1a(CFG, rng)
    b = search.step1b(a, CFG)
    c = search.step1c(b, CFG)
    m = search.optimize_M(c, CFG)
    return SimpleNamespace(a=a, b=b, c=c, m=m)


@pytest.mark.parametrize("triple", [(7, 4, 4), (12, 5, 4), (12, 5, 5), (6, 4, 4), (7, 5, 5)])
def test_config_accepts(triple):
    assert SearchConfig(*triple).triple == triple


@pytest.mark.parametrize("triple", [(5, 4, 4), (6, 5, 5), (7, 4, 6), (7, 6, 4), (7, 3, 4)])
def test_config_rejects(triple):
    with pytest.raises(ValueError):
        SearchConfig(*triple)


def _c(F, m):
    return SimpleNamespace(F_value=F, max_coeff=m)


def test_pareto_examples():
    one = _c(1, 1)
    assert search.pareto_select([one]) == [one]
    a, b = _c(1, 2), _c(2, 1)
    assert search.pareto_select([a, b]) == [a, b]
    good, bad = _c(1, 1), _c(2, 2)
    assert search.pareto_select([bad, good]) == [good]
    with pytest.raises(ValueError):
        search.pareto_select([])


def test_leading_block_reproduces_catalog(builtins):
    for name in ("dirk744", "dirk1254", "dirk1255"):
        A = builtins[name].A
        blocks = [search.leading_block(A[0, 0], A[1, 1], A[2, 2], br) for br in (0, 1)]
        best = min(np.abs(B - A[:3, :3]).max() for B in blocks if B is not None)
        assert best <= 1e-13, name


def test_leading_block_degenerate():
    # equal a11 and a33 collapse the quadratic to a confluent double root
    assert search.leading_block(0.0, 0.2, 0.0, 0) is None


def test_objective_matches_conditions(builtins):
    for t in builtins.values():
        for p in (1, 2, 3, 4):
            assert search.objective_of(t, p) == pytest.approx(conditions.objective_F(t, p), rel=1e-12, abs=1e-26)


def test_cs_jacobian():
    def fun(X):
        X = np.atleast_2d(X)
        return np.stack([X[:, 0] ** 2 * X[:, 1], np.sin(X[:, 1])], axis=1)

    x = np.array([1.5, -0.4])
    f0, J = search.cs_jacobian(fun, x)
    np.testing.assert_allclose(f0, [1.5**2 * -0.4, np.sin(-0.4)])
    np.testing.assert_allclose(J, [[2 * 1.5 * -0.4, 1.5**2], [0.0, np.cos(-0.4)]], rtol=1e-15)


def test_step1a_output(stages):
    t = stages.a.tableau
    assert wso.wso_of(t).q >= CFG.q
    np.testing.assert_array_equal(t.A[-1], t.b)
    assert t.A[0, 0] != t.A[1, 1]
    assert stages.a.eq_residual <= CFG.eq_tol
    assert np.abs(t.A).max() <= CFG.coeff_bound
    roots = np.sort(wso.wso_of(t).min_poly_roots.real)
    np.testing.assert_allclose(roots, np.sort([t.A[0, 0], t.A[1, 1]]), atol=1e-6)


def test_step1b_refines_and_is_idempotent(stages):
    assert stages.b.eq_residual <= max(stages.a.eq_residual, 1e-14)
    again = search.step1b(stages.b, CFG)
    assert abs(again.eq_residual - stages.b.eq_residual) <= 1e-15


def test_step1c_feasible(stages):
    t = stages.c.tableau
    assert stages.c.feasible
    assert np.diag(t.A).min() >= 0 and t.c.min() >= 0
    y = CFG.cr6_samples
    assert np.abs(stability.R(t, 1j * y)).max() <= 1 + 1e-8


def test_optimize_monotone_and_feasible(stages):
    assert stages.m.F_value <= stages.c.F_value + 1e-14
    assert stages.m.eq_residual <= 1e-10
    assert stages.m.F_value == pytest.approx(conditions.objective_F(stages.m.tableau, 4), rel=1e-10)


def test_pipeline_candidate_passes_verifier(stages):
    ver = search.verify_candidate(stages.m.tableau, 4, 4)
    assert ver.passed
    assert ver.order >= 4 and ver.wso >= 4 and ver.dim_Kq == 2
    assert ver.irreducible and ver.stiffly_accurate and ver.a_stable


def test_verifier_rejects_low_wso(builtins):
    ver = search.verify_candidate(builtins["dirk541"], 4, 4)
    assert not ver.passed and ver.wso == 1
    assert search.verify_candidate(builtins["dirk744"], 4, 4).passed


def test_seed_determinism():
    a, _ = search.run_restart(CFG, GOOD_RESTART, optimize=False)
    b, _ = search.run_restart(CFG, GOOD_RESTART, optimize=False)
    assert a.tableau.A.tobytes() == b.tableau.A.tobytes()
    assert a.tableau.label == f"dirk744-seed0-r{GOOD_RESTART:05d}"


def test_restart_streams_independent():
    x = search.restart_rng(0, 1).random(4)
    y = search.restart_rng(0, 2).random(4)
    assert not np.array_equal(x, y)
    np.testing.assert_array_equal(x, search.restart_rng(0, 1).random(4))


def test_save_load_round_trip(stages, tmp_path):
    c = stages.m
    search.save_candidate(c, tmp_path)
    back = search.load_candidate(tmp_path / f"candidate_{c.restart:05d}.json", CFG)
    np.testing.assert_array_equal(back.tableau.A, c.tableau.A)
    np.testing.assert_array_equal(back.tableau.b, c.tableau.b)
    loaded = tableau.from_text((tmp_path / f"candidate_{c.restart:05d}.txt").read_text())
    np.testing.assert_array_equal(loaded.A, c.tableau.A)


def test_run_search_checkpoint_and_resume(tmp_path):
    cfg = SearchConfig(7, 4, 4, restarts=3)
    first = search.run_search(cfg, out_dir=tmp_path, optimize=False)
    status = json.loads((tmp_path / "progress.json").read_text())["status"]
    assert sorted(status) == ["0", "1", "2"]
    assert len(first.pool) + sum(first.failures.values()) == 3
    cfg5 = SearchConfig(7, 4, 4, restarts=5)
    second = search.run_search(cfg5, out_dir=tmp_path, optimize=False)
    status = json.loads((tmp_path / "progress.json").read_text())["status"]
    assert sorted(status) == ["0", "1", "2", "3", "4"]
    for c in first.pool:
        same = [d for d in second.pool if d.restart == c.restart]
        assert same and same[0].tableau.A.tobytes() == c.tableau.A.tobytes()
    for c in second.pool:
        assert search.verify_candidate(c.tableau, 4, 4).passed
        assert not tableau.reduce_confluent(c.tableau).reducible

import subprocess
import sys

import numpy as np
import pytest

from dirkwso import cli, convergence, tableau


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def report(text):
    return dict(line.split(": ", 1) for line in text.strip().splitlines())


def test_list(capsys):
    code, out, _ = run(["list"], capsys)
    assert code == 0
    assert {"dirk744", "dirk1254", "dirk1255"} <= set(out.split())


def test_list_problems(capsys):
    code, out, _ = run(["list", "--problems"], capsys)
    assert code == 0 and "prothero_robinson" in out.split()


def test_verify_expect_match(capsys):
    code, out, _ = run(["verify", "dirk744", "--expect", "4,4"], capsys)
    assert code == 0
    rep = report(out)
    assert rep["order"] == "4" and rep["wso"] == "4" and rep["dim_Kq"] == "2"
    # tolerances are echoed
    assert rep["wso_tol"] == "1e-08"


def test_verify_expect_mismatch(capsys):
    code, _, _ = run(["verify", "backward_euler", "--expect", "2,1"], capsys)
    assert code == 1


def test_verify_seventeen_digits(capsys):
    _, out, _ = run(["verify", "dirk744"], capsys)
    roots = report(out)["min_poly_roots"].split()
    t = tableau.builtin("dirk744")
    assert float(roots[1]) == pytest.approx(t.A[0, 0], abs=1e-12)
    assert len(roots[1].replace(".", "").lstrip("0")) >= 16


def test_verify_tableau_file(tmp_path, capsys):
    path = tmp_path / "be.txt"
    path.write_text(tableau.to_text(tableau.builtin("backward_euler")))
    code, out, _ = run(["verify", str(path), "--expect", "1,1"], capsys)
    assert code == 0


@pytest.mark.parametrize(
    "argv",
    [
        ["verify", "no_such_scheme"],
        ["verify", "dirk744", "--expect", "4"],
        ["converge", "--scheme", "dirk744", "--problem", "nope", "--dts", "0.1"],
        ["converge", "--scheme", "dirk744", "--problem", "prothero_robinson", "--dts", "0.3"],
        ["converge", "--scheme", "dirk744", "--problem", "prothero_robinson", "--dts", "x"],
        ["stability", "dirk744", "--window", "1,2,3"],
        ["search", "--s", "5", "--p", "4", "--q", "4", "--out", "unused"],
        [],
        ["frobnicate"],
    ],
)
def test_usage_errors(argv, capsys):
    code, _, err = run(argv, capsys)
    assert code == 2
    assert err


def test_stability_exports(tmp_path, capsys):
    csv, svg = tmp_path / "r.csv", tmp_path / "r.svg"
    code, _, _ = run(
        ["stability", "backward_euler", "--window=-1,3,-2,2", "--resolution", "101,101",
         "--out", str(csv), "--svg", str(svg)],
        capsys,
    )
    assert code == 0
    rows = [ln.split(",") for ln in csv.read_text().splitlines()[1:] if not ln.startswith("nan")]
    pts = np.array([complex(float(a), float(b)) for a, b in rows])
    np.testing.assert_allclose(np.abs(pts - 1), 1, atol=5e-3)
    assert svg.read_text().startswith("<svg")


def test_converge_writes_csv(tmp_path, capsys):
    code, out, _ = run(
        ["converge", "--scheme", "dirk744,dirk541", "--problem", "prothero_robinson",
         "--dts", "0.625,0.3125,0.15625", "--window", "0.15625,0.625", "--out", str(tmp_path)],
        capsys,
    )
    assert code == 0
    files = sorted(p.name for p in tmp_path.iterdir())
    assert files == ["dirk541_prothero_robinson.csv", "dirk744_prothero_robinson.csv"]
    text = (tmp_path / "dirk744_prothero_robinson.csv").read_text()
    assert text.startswith(convergence.HEADER)
    assert len(convergence.read_csv(text)) == 3
    assert "# window 0:" in text


def test_converge_is_deterministic(capsys):
    argv = ["converge", "--scheme", "dirk1254", "--problem", "heat", "--n", "50", "--dts", "0.25,0.125"]
    first = run(argv, capsys)[1]
    assert run(argv, capsys)[1] == first


def test_export_formats(capsys):
    code, out, _ = run(["export", "dirk744"], capsys)
    assert code == 0
    np.testing.assert_array_equal(tableau.from_text(out).A, tableau.builtin("dirk744").A)
    code, out, _ = run(["export", "backward_euler", "--format", "csv"], capsys)
    assert out.splitlines()[0] == "i,j,value"


def test_search_small(tmp_path, capsys):
    code, out, _ = run(
        ["search", "--s", "7", "--p", "4", "--q", "4", "--restarts", "2", "--no-optimize",
         "--out", str(tmp_path)],
        capsys,
    )
    assert code in (0, 1)
    assert (tmp_path / "progress.json").exists()
    if code == 0:
        assert list(tmp_path.glob("candidate_*.txt"))


def test_module_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "dirkwso", "verify", "dirk1255", "--expect", "5,5"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "wso: 5" in proc.stdout

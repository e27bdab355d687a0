import csv
import os
import subprocess
import sys

import pytest

from stsparse import cli
from stsparse.config import ConfigError, parse_config


def _write(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


PAIRED = """problem = example1
n0 = 3
paired = true
line = 0 0 0.25 ; 1 1 0.25 ; 12
"""


def test_paired_run_writes_declared_files(tmp_path):
    out = tmp_path / "out"
    cfg = _write(tmp_path, PAIRED + f"out = {out}\n")
    assert cli.main(["run", cfg]) == cli.EXIT_OK
    golden = sorted([
        "comparison.csv", "summary.txt",
        "sparse_solution.vtk", "sparse_convergence.csv", "sparse_objective.csv", "sparse_line0.csv",
        "nonsparse_solution.vtk", "nonsparse_convergence.csv", "nonsparse_objective.csv",
        "nonsparse_line0.csv",
    ])
    assert sorted(os.listdir(out)) == golden
    assert cli.expected_outputs(parse_config(PAIRED)) == golden
    comp = {r[0]: r[1:] for r in _read_csv(out / "comparison.csv")[1:]}
    sparse_l1, plain_l1 = (float(v) for v in comp["control_l1_norm"])
    assert sparse_l1 < plain_l1
    assert float(comp["sparsity_fraction"][0]) > float(comp["sparsity_fraction"][1])
    conv = _read_csv(out / "sparse_convergence.csv")
    assert conv[0] == cli.CONVERGENCE_HEADER
    assert float(conv[-1][4]) <= 1e-5
    line = _read_csv(out / "sparse_line0.csv")
    assert line[0] == ["s", "x1", "x2", "t", "u", "p", "z", "active_set"] and len(line) == 14
    assert "control L1 norm: sparse" in (out / "summary.txt").read_text()


def test_adaptive_override_and_outputs(tmp_path):
    out = tmp_path / "ad"
    cfg = _write(tmp_path, "problem = example1\nn0 = 3\n")
    assert cli.main(["run", cfg, "--adaptive", "1", "--out", str(out), "--mu", "0.002"]) == 0
    names = sorted(os.listdir(out))
    assert names == sorted(["sparse_step0.vtk", "sparse_step1.vtk", "sparse_adaptive.csv",
                            "sparse_convergence.csv", "sparse_objective.csv", "summary.txt"])
    rows = _read_csv(out / "sparse_adaptive.csv")
    assert len(rows) == 3 and int(rows[2][2]) > int(rows[1][2])
    obj = dict(_read_csv(out / "sparse_objective.csv")[1:])
    assert float(obj["mu"]) == 0.002


def test_manufactured_run(tmp_path):
    out = tmp_path / "m"
    cfg = _write(tmp_path, f"problem = manufactured\nn0 = 4\nout = {out}\n")
    assert cli.main(["run", cfg]) == 0
    assert (out / "nonsparse_solution.vtk").exists()


@pytest.mark.parametrize("text", ["problem = example1\nmu = banana\n", "mu = 1\n",
                                  "problem = example1\nfoo = 1\n"])
def test_configuration_errors_exit_2(tmp_path, capsys, text):
    assert cli.main(["run", _write(tmp_path, text)]) == cli.EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_missing_config_file_exits_2(tmp_path):
    assert cli.main(["run", str(tmp_path / "nope.cfg")]) == cli.EXIT_CONFIG


def test_bad_override_exits_2(tmp_path):
    cfg = _write(tmp_path, "problem = example1\nn0 = 2\n")
    assert cli.main(["run", cfg, "--mu", "-1", "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG


def test_solver_failure_exits_3(tmp_path, capsys):
    cfg = _write(tmp_path, f"problem = example1\nn0 = 3\nnewton_maxiter = 1\nstart = zero\n"
                           f"out = {tmp_path / 'o'}\n")
    assert cli.main(["run", cfg]) == cli.EXIT_SOLVER
    assert "solver failure" in capsys.readouterr().err


def test_point_outside_mesh_exits_1(tmp_path):
    cfg = _write(tmp_path, f"problem = example1\nn0 = 2\nline = 0 0 0 ; 2 0 0 ; 4\n"
                           f"out = {tmp_path / 'o'}\n")
    assert cli.main(["run", cfg]) == cli.EXIT_ERROR


def test_mesh_info(tmp_path, capsys):
    cfg = _write(tmp_path, "problem = example2\nn0 = 2\n")
    target = tmp_path / "mesh.txt"
    assert cli.main(["mesh-info", cfg, "--levels", "1", "--write", str(target)]) == 0
    out = capsys.readouterr().out
    assert "elements       384" in out and "bc=neumann" in out
    from stsparse.mesh import read_mesh_text
    assert read_mesh_text(target).num_elements == 384


def test_verify(capsys):
    assert cli.main(["verify", "--n0", "4", "--levels", "2"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out
    assert cli.main(["verify", "--n0", "2", "--levels", "1", "--min-order", "5"]) == cli.EXIT_SOLVER


def test_thread_setting(monkeypatch):
    import numba
    before = numba.get_num_threads()
    monkeypatch.setattr(cli, "_threads", "two")
    with pytest.raises(ConfigError):
        cli.set_threads()
    monkeypatch.setattr(cli, "_threads", "1")
    try:
        cli.set_threads()
        assert numba.get_num_threads() == 1
    finally:
        numba.set_num_threads(before)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "stsparse", "--help"], capture_output=True,
                         text=True, check=True)
    assert "mesh-info" in res.stdout and "verify" in res.stdout

import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from gliv.cli import main
from gliv.data import write_csv
from gliv.schemas import load_report
from gliv.simulation import DgpSpec, generate
from gliv.typeconfig import TypeConfig


@pytest.fixture(scope="module")
def data_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "dgp2.csv"
    ds, _ = generate(DgpSpec("discrete", 3000, 17))
    write_csv(ds, path)
    return path


@pytest.fixture(scope="module")
def defier_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "defier.csv"
    assert main(["simulate", "--dgp", "discrete", "--n", "3000", "--seed", "17",
                 "--defier-share", "0.1", "--sample-out", str(path)]) == 0
    return path


def _run(tmp_path, *argv):
    out = tmp_path / "report.json"
    code = main([*argv, "--out", str(out), "--table", str(tmp_path / "table.txt")])
    return code, (json.loads(out.read_text()) if out.exists() else None)


def test_estimate_happy_path(tmp_path, data_csv):
    code, rep = _run(tmp_path, "estimate", "--config", "main_example", "--data", str(data_csv))
    assert code == 0
    assert len(rep["rows"]) == 9
    assert rep["manifest"]["command"] == "estimate"
    assert "Std Err" in (tmp_path / "table.txt").read_text()


def test_estimate_switchers_and_influence(tmp_path, data_csv):
    infl = tmp_path / "psi.csv"
    code, rep = _run(tmp_path, "estimate", "--config", "main_example", "--data", str(data_csv),
                     "--params", "beta:t1:1,p:t1:1", "--switchers", "--influence", str(infl))
    assert code == 0
    assert {d["name"] for d in rep["derived"]} == {"switchers:t1", "switchers:t2", "switchers:t3"}
    psi = np.loadtxt(infl, delimiter=",", skiprows=1)
    assert psi.shape == (3000, 2)
    assert np.abs(psi.mean(axis=0)).max() < 1e-10


def test_unknown_label_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("y,t,z,x1\n1.0,t1,z1,0.5\n2.0,t9,z2,0.5\n")
    assert main(["estimate", "--config", "main_example", "--data", str(bad)]) == 2
    assert "t9" in capsys.readouterr().err


def test_non_monotone_config_exit_2(tmp_path, data_csv, capsys):
    cfg = TypeConfig.from_columns(["t1", "t2", "t3"], ["z1", "z2"], [("t1", "t2"), ("t2", "t1")])
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert main(["estimate", "--config", str(path), "--data", str(data_csv)]) == 2
    assert "[[1, 0], [0, 1]]" in capsys.readouterr().err


def test_empty_cell_exit_3(tmp_path, capsys):
    path = tmp_path / "thin.csv"
    path.write_text("y,t,z,x1\n1.0,t1,z1,0.5\n2.0,t3,z2,0.5\n0.5,t3,z1,0.6\n")
    assert main(["estimate", "--config", "main_example", "--data", str(path)]) == 3
    assert "0.6" in capsys.readouterr().err


def test_bad_flag_value_exit_2(data_csv):
    with pytest.raises(SystemExit) as exc:
        main(["dml", "--config", "main_example", "--data", str(data_csv), "--folds", "two"])
    assert exc.value.code == 2


def test_dml_command(tmp_path, data_csv):
    code, rep = _run(tmp_path, "dml", "--config", "main_example", "--data", str(data_csv),
                     "--params", "beta:t1:1", "--folds", "5", "--seed", "3")
    _, est = _run(tmp_path, "estimate", "--config", "main_example", "--data", str(data_csv),
                  "--params", "beta:t1:1")
    assert code == 0
    assert abs(rep["rows"][0]["estimate"] - est["rows"][0]["estimate"]) < 0.01


def test_gmm_matches_estimate(tmp_path, data_csv):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps([{"j": 1, "t": "t1", "k": 1, "kind": "mean", "selector": [1]}]))
    code, g = _run(tmp_path, "gmm", "--config", "main_example", "--data", str(data_csv), "--spec", str(spec))
    _, e = _run(tmp_path, "estimate", "--config", "main_example", "--data", str(data_csv), "--params", "beta:t1:1")
    assert code == 0
    assert abs(g["eta_hat"][0] - e["rows"][0]["estimate"]) < 1e-6
    assert abs(g["standard_errors"][0] - e["rows"][0]["se"]) < 1e-6


def test_gmm_missing_spec(tmp_path, data_csv):
    assert main(["gmm", "--config", "main_example", "--data", str(data_csv),
                 "--spec", str(tmp_path / "none.json")]) == 2


def test_implications_clean_and_corrupted(tmp_path, data_csv, defier_csv, capsys):
    code, rep = _run(tmp_path, "test-implications", "--config", "main_example", "--data", str(data_csv))
    assert code == 0 and rep["passed"]
    code, rep = _run(tmp_path, "test-implications", "--config", "main_example", "--data", str(defier_csv))
    assert code == 4 and not rep["passed"]
    assert "Q[" in (tmp_path / "table.txt").read_text()
    assert "violated" in capsys.readouterr().err


def test_implications_breakpoints(tmp_path, data_csv):
    code, rep = _run(tmp_path, "test-implications", "--config", "main_example", "--data", str(data_csv),
                     "--breakpoints", "0,1,2")
    assert code == 0
    assert rep["breakpoints"] == [0.0, 1.0, 2.0]


def test_simulate_byte_identical(tmp_path):
    outs = []
    for i, threads in enumerate(["1", "1", "2"]):
        out = tmp_path / f"sim{i}.json"
        argv = ["simulate", "--dgp", "discrete", "--n", "3000", "--reps", "50", "--seed", "1",
                "--threads", threads, "--out", str(out), "--table", str(tmp_path / f"t{i}.txt")]
        assert main(argv) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1] == outs[2]


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("GLIV_SEED", "5")
    code, rep = _run(tmp_path, "simulate", "--n", "400", "--reps", "3")
    assert code == 0
    assert rep["manifest"]["seed"] == 5


def test_reports_validate_against_schema(tmp_path, data_csv):
    for argv in (["estimate", "--config", "main_example", "--data", str(data_csv)],
                 ["test-implications", "--config", "main_example", "--data", str(data_csv)],
                 ["simulate", "--n", "400", "--reps", "3", "--seed", "2"]):
        out = tmp_path / "r.json"
        main([*argv, "--out", str(out), "--table", str(tmp_path / "t.txt")])
        text = out.read_text()
        assert load_report(text).model_dump_json(indent=2) + "\n" == text


def test_replay_reproduces(tmp_path, data_csv):
    first = tmp_path / "first.json"
    assert main(["estimate", "--config", "main_example", "--data", str(data_csv), "--params", "beta:t2:1",
                 "--out", str(first), "--table", str(tmp_path / "t.txt")]) == 0
    again = tmp_path / "again.json"
    assert main(["replay", str(first), "--out", str(again), "--table", str(tmp_path / "t2.txt"), "--check"]) == 0
    assert again.read_bytes() == first.read_bytes()


def test_inputs_not_modified(tmp_path, data_csv):
    before = data_csv.read_bytes()
    _run(tmp_path, "estimate", "--config", "main_example", "--data", str(data_csv))
    assert data_csv.read_bytes() == before


def test_console_script(data_csv):
    exe = shutil.which("gliv")
    cmd = [exe] if exe else [sys.executable, "-m", "gliv.cli"]
    res = subprocess.run([*cmd, "estimate", "--config", "main_example", "--data", str(data_csv),
                          "--params", "p:t1:1"], capture_output=True, text=True)
    assert res.returncode == 0
    assert json.loads(res.stdout)["rows"][0]["parameter"] == "p:t1:1"

import json

import numpy as np
import pytest

from aftgof.cli import main
from aftgof.data import save_csv
from aftgof.simulate import ScenarioConfig, generate


@pytest.fixture(scope="module")
def csv_path(tmp_path_factory):
    d = generate(ScenarioConfig("S2", 80, 0.0, 0.2, seed=6))
    path = tmp_path_factory.mktemp("cli") / "d.csv"
    save_csv(d, path)
    return path


def test_fit(csv_path, tmp_path, capsys):
    out = tmp_path / "fit.json"
    assert main(["fit", "-i", str(csv_path), "-o", str(out)]) == 0
    d = json.loads(out.read_text())
    assert d["names"] == ["z1", "z2"] and len(d["beta"]) == 2 and d["converged"]
    man = json.loads((tmp_path / "fit.manifest.json").read_text())
    assert man["estimator"] == "mis" and len(man["input_sha256"]) == 64
    assert main(["fit", "-i", str(csv_path), "--covariates", "z2"]) == 0
    assert len(json.loads(capsys.readouterr().out)["beta"]) == 1


def test_fit_standardized(csv_path, capsys):
    assert main(["fit", "-i", str(csv_path), "--standardize", "--exempt-binary"]) == 0
    d = json.loads(capsys.readouterr().out)
    sd = np.array(d["standardization"]["sd"])
    assert sd[0] == 1.0
    np.testing.assert_allclose(d["beta_original"], np.array(d["beta_standardized"]) / sd)


def test_gof_identical_twice(csv_path, tmp_path, capsys):
    outs = []
    for k in range(2):
        out = tmp_path / f"g{k}.json"
        args = ["gof", "-i", str(csv_path), "-t", "omni", "-t", "form:z2", "-K", "30",
                "--seed", "3", "-o", str(out)]
        assert main(args) == 0
        outs.append(out.read_text())
    assert outs[0] == outs[1]
    printed = capsys.readouterr().out.splitlines()
    assert printed[0].startswith("omnibus (standardized, mis): sup = ")
    assert "K_effective = 30 of 30" in printed[0]
    reports = json.loads(outs[0])["reports"]
    assert [r["test"] for r in reports] == ["omnibus", "form:z2"]


def test_gof_all_forms_and_plot_csv(csv_path, tmp_path):
    plot = tmp_path / "p.csv"
    args = ["gof", "-i", str(csv_path), "-t", "all-forms", "-K", "10", "--unstd",
            "-o", str(tmp_path / "g.json"), "--plot-csv", str(plot)]
    assert main(args) == 0
    assert (tmp_path / "p_form_z1.csv").exists() and (tmp_path / "p_form_z2.csv").exists()
    reports = json.loads((tmp_path / "g.json").read_text())["reports"]
    assert all(not r["standardized"] for r in reports)


def test_plotdata_stdout(csv_path, capsys):
    assert main(["plotdata", "-i", str(csv_path), "-t", "link", "-K", "5"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "test,path_id,z_rank,value"
    assert {line.split(",")[1] for line in lines[1:]} == {"obs", "1", "2", "3", "4", "5"}


def test_malformed_csv_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("time,status,x\n1,1,0\n2,1,oops\n3,0,1\n")
    assert main(["fit", "-i", str(bad)]) == 2
    assert "row 2" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["fit", "-i", "missing.csv"],
    ["gof", "-i", "{csv}", "-t", "form:nope"],
    ["gof", "-i", "{csv}", "-K", "0"],
    ["fit", "-i", "{csv}", "--estimator", "ols"],
    ["simulate", "--tests", "bogus", "--reps", "1"],
    ["simulate", "--config", "nope.cfg"],
])
def test_input_errors_exit_2(argv, csv_path):
    assert main([a.format(csv=csv_path) for a in argv]) == 2


def test_identical_covariates_exit_2(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("time,status,x\n1,1,1\n2,1,1\n3,0,1\n4,1,1\n")
    assert main(["fit", "-i", str(p)]) == 2


def test_simulate_config_and_determinism(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("scenario = S1\nn = 50\ngamma = 0, 0.3  # two cells\nreps = 3\npaths = 10\n"
                   "tests = omnibus\nestimators = mis\n")
    outs = []
    for k in range(2):
        out = tmp_path / f"sim{k}.csv"
        assert main(["simulate", "-c", str(cfg), "--seed", "4", "-o", str(out),
                     "--summary", str(tmp_path / f"s{k}.json")]) == 0
        outs.append(out.read_text())
    assert outs[0] == outs[1]
    assert outs[0].splitlines()[0] == "scenario,gamma,test,mis_n50_c20,mis_unstd_n50_c20"
    man = json.loads((tmp_path / "sim0.manifest.json").read_text())
    assert man["seed"] == 4 and man["paths"] == 10 and man["settings"]["gamma"] == [0.0, 0.3]
    summary = json.loads((tmp_path / "s0.json").read_text())
    assert len(summary["cells"]) == 4


def test_gof_density_sensitivity(csv_path, tmp_path):
    out = tmp_path / "g.json"
    args = ["gof", "-i", str(csv_path), "-K", "10", "--sensitivity", "density", "-o", str(out)]
    assert main(args) == 0
    assert json.loads((tmp_path / "g.manifest.json").read_text())["sensitivity"] == "density"
    assert main(["gof", "-i", str(csv_path), "--sensitivity", "other"]) == 2

# test_main.py
import json

import pandas as pd
import pytest

from main import build_parser, main, sha256
from report import build_report


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--out-dir", str(out), "--seed", "11", "--grid-points", "11"]) == 0
    return out


@pytest.fixture(scope="module")
def weighting_dir(tmp_path_factory, sim_dir):
    out = tmp_path_factory.mktemp("weighting")
    code = main(["fit-weighting", "--out-dir", str(out), "--data", str(sim_dir / "trial.csv"),
                 "--bootstrap", "2", "--grid-points", "11", "--t-max", "30"])
    assert code == 0
    return out


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_simulate_outputs_and_manifest(sim_dir):
    manifest = json.loads((sim_dir / "manifest.json").read_text())
    assert manifest["command"] == "simulate"
    assert manifest["seed"] == 11
    assert set(manifest["outputs"]) == {"trial.csv", "truth.csv", "spec.json", "true_curves.json", "truth.svg"}
    for name, digest in manifest["outputs"].items():
        assert sha256(sim_dir / name) == digest
    trial = pd.read_csv(sim_dir / "trial.csv")
    assert len(trial) == 732
    assert {"Z", "D", "time", "event", "age", "male", "nephrectomy", "risk"} == set(trial.columns)
    assert (sim_dir / "run.log").exists()


def test_simulate_is_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["simulate", "--out-dir", str(out), "--seed", "3", "--n", "100", "--grid-points", "5"]) == 0
    assert len(pd.read_csv(a / "trial.csv")) == 100
    first = json.loads((a / "manifest.json").read_text())["outputs"]
    second = json.loads((b / "manifest.json").read_text())["outputs"]
    for name in ("trial.csv", "truth.csv", "spec.json", "true_curves.json"):
        assert first[name] == second[name]


def test_fit_weighting_outputs(weighting_dir):
    manifest = json.loads((weighting_dir / "manifest.json").read_text())
    assert set(manifest["outputs"]) == {"estimate.json", "curves.csv", "smd.csv", "profiles.csv", "balance.svg", "spce.svg"}
    assert manifest["inputs"]["data"]["sha256"]
    estimate = json.loads((weighting_dir / "estimate.json").read_text())
    assert estimate["engine"] == "weighting"
    assert "intervals" in estimate
    assert len(estimate["grid"]) == 11


def test_fit_mixture_smoke(tmp_path, sim_dir):
    code = main(["fit-mixture", "--out-dir", str(tmp_path), "--data", str(sim_dir / "trial.csv"),
                 "--chains", "1", "--iters", "10", "--grid-points", "5", "--t-max", "30"])
    assert code == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert set(manifest["outputs"]) == {"summary.json", "draws.csv", "curves.csv", "spce.svg"}
    assert manifest["arguments"]["burnin"] == 5
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["assumptions"]["monotonicity"] is True
    report = build_report([tmp_path], tmp_path / "report.md").read_text()
    assert "Covariate profile by stratum" in report
    assert "| age |" in report


@pytest.mark.slow
def test_fit_mixture_em(tmp_path, sim_dir):
    code = main(["fit-mixture", "--out-dir", str(tmp_path), "--data", str(sim_dir / "trial.csv"),
                 "--em", "--no-monotonicity", "--grid-points", "5", "--t-max", "30"])
    assert code == 0
    payload = json.loads((tmp_path / "em.json").read_text())
    assert payload["engine"] == "mixture-em"
    assert set(payload["proportions"]) == {"00", "01", "10", "11"}


def test_sensitivity_zeta_sweep(tmp_path, sim_dir):
    code = main(["sensitivity", "--out-dir", str(tmp_path), "--data", str(sim_dir / "trial.csv"),
                 "--zeta", "0", "0.1", "--grid-points", "5", "--t-max", "30"])
    assert code == 0
    frame = pd.read_csv(tmp_path / "sweep.csv")
    assert sorted(frame["zeta"].unique()) == [0.0, 0.1]
    assert json.loads((tmp_path / "manifest.json").read_text())["config"]["sweep"] == "zeta"


def test_sensitivity_zeta_out_of_range(tmp_path, sim_dir):
    code = main(["sensitivity", "--out-dir", str(tmp_path), "--data", str(sim_dir / "trial.csv"),
                 "--zeta", "0.99", "--grid-points", "5"])
    assert code == 1
    error = json.loads((tmp_path / "error.json").read_text())
    assert error["success"] is False
    assert error["type"] == "ZetaOutOfRangeError"
    assert not (tmp_path / "manifest.json").exists()


def test_bad_data_reports_error(tmp_path):
    data = tmp_path / "bad.csv"
    data.write_text("Z,D,time,event,x\n0,0,1.0,1,0.1\n0,7,1.5,1,0.2\n")
    out = tmp_path / "run"
    assert main(["fit-weighting", "--out-dir", str(out), "--data", str(data), "--bootstrap", "2"]) == 1
    assert json.loads((out / "error.json").read_text())["type"] == "DataParseError"


def test_report_over_runs(tmp_path, sim_dir, weighting_dir):
    out = tmp_path / "report"
    assert main(["report", "--out-dir", str(out), str(sim_dir), str(weighting_dir)]) == 0
    text = (out / "report.md").read_text()
    assert "## Simulated trial" in text
    assert "## Weighting estimator" in text
    assert "Covariate profile by stratum" in text
    assert "| nephrectomy |" in text
    assert "| 00 |" in text


def test_report_missing_run(tmp_path):
    out = tmp_path / "report"
    assert main(["report", "--out-dir", str(out), str(tmp_path / "nowhere")]) == 1
    assert json.loads((out / "error.json").read_text())["type"] == "ReportInputError"

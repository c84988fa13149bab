import io
import json
import logging
from pathlib import Path

import pytest

from ivbart import SCHEMA_VERSION, cli
from ivbart.cli import FitConfig
from ivbart.exceptions import ConfigError, InputError
from ivbart.models import Variant
from ivbart.simlab import SimScenario, write_dataset
from ivbart.streams import read_table

GOLDEN = Path(__file__).parent / "data" / "golden_fit"


def _write_json(path, obj):
    path.write_text(json.dumps(obj), encoding="utf-8")
    return path


@pytest.fixture(name="fit_setup")
def fixture_fit_setup(tmp_path):
    write_dataset(SimScenario("linear-g", rho=0.5, n=60, n_snps=5, n_x=2, seed=2), 0, tmp_path / "data.csv")
    config = {
        "data": "data.csv",
        "outcome": "y",
        "exposure": "t",
        "instruments": ["z1", "z2", "z3", "z4", "z5"],
        "covariates": ["x1", "x2"],
        "model": {"variant": "ivbart-g", "H_t": 3, "H_y": 3},
        "burn_in": 2,
        "draws": 3,
        "chains": 2,
        "seed": 5,
        "output": "out",
        "grid": {"profiles": [{"x1": -0.5}, {"x1": 0.5}], "labels": ["x1=-0.5", "x1=+0.5"]},
    }
    return tmp_path, config


def test_fit(fit_setup):
    tmp_path, config = fit_setup
    path = _write_json(tmp_path / "fit.json", config)
    assert cli.main(["fit", "--config", str(path)]) == 0

    out = tmp_path / "out"
    for name in ("draws.jsonl", "pd_summary.csv", "pd_summary.svg", "rho_per_draw.csv", "rho_per_observation.csv",
                 "rho.svg", "rho_trace.svg", "scalar_summary.csv", "summary.json"):
        assert (out / name).exists(), name
    assert len((out / "draws.jsonl").read_text(encoding="utf-8").splitlines()) == 1 + 6

    pd_summary, stamp = read_table(out / "pd_summary.csv")
    assert len(pd_summary) == 10
    assert stamp["seed"] == "5"
    rho_per_observation, _ = read_table(out / "rho_per_observation.csv")
    assert len(rho_per_observation) == 2 * 60

    report = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    assert report["schema"] == SCHEMA_VERSION
    assert report["config"]["model"]["variant"] == "ivbart-g"
    assert report["tsls"]["se_beta"] > 0
    assert {row["quantity"] for row in report["scalars"]} == {"beta", "rho_mean"}


def test_fit_is_reproducible(fit_setup):
    tmp_path, config = fit_setup
    path = _write_json(tmp_path / "fit.json", config)
    assert cli.main(["fit", "--config", str(path), "--output", str(tmp_path / "a")]) == 0
    assert cli.main(["fit", "--config", str(path), "--output", str(tmp_path / "b")]) == 0
    for name in ("draws.jsonl", "pd_summary.csv", "pd_summary.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert cli.main(["fit", "--config", str(path), "--output", str(tmp_path / "c"), "--seed", "6"]) == 0
    assert (tmp_path / "c" / "draws.jsonl").read_bytes() != (tmp_path / "a" / "draws.jsonl").read_bytes()


def test_fit_without_draws(fit_setup):
    tmp_path, config = fit_setup
    config["draws"] = 0
    path = _write_json(tmp_path / "fit.json", config)
    assert cli.main(["fit", "--config", str(path)]) == 0
    lines = (tmp_path / "out" / "draws.jsonl").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 1
    assert json.loads(lines[0])["schema"] == SCHEMA_VERSION


def test_fit_matches_golden_summary(tmp_path):
    assert cli.main(["fit", "--config", str(GOLDEN / "fit.json"), "--output", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "summary.json").read_text(encoding="utf-8"))
    golden = json.loads((GOLDEN / "summary.json").read_text(encoding="utf-8"))
    config = {key: value for key, value in report["config"].items() if key not in ("data", "output")}
    assert config == golden["config"]
    assert (report["schema"], report["seed"]) == (golden["schema"], golden["seed"])
    assert report["tsls"].pop("perfect_first_stage") is golden["tsls"].pop("perfect_first_stage")
    assert report["tsls"] == pytest.approx(golden["tsls"], abs=1e-10)


def test_bad_cell_is_reported(tmp_path, caplog):
    (tmp_path / "data.csv").write_text("y,t,z1\n1.0,2.0,0\n3.0,abc,1\n", encoding="utf-8")
    with pytest.raises(InputError, match="row 2, column 't'"):
        cli.load_csv(tmp_path / "data.csv", ["y", "t", "z1"])

    path = _write_json(tmp_path / "fit.json", {"data": "data.csv", "outcome": "y", "exposure": "t",
                                                "instruments": ["z1"]})
    with caplog.at_level(logging.ERROR, logger="ivbart.cli"):
        assert cli.main(["fit", "--config", str(path)]) == 2
    assert "row 2, column 't'" in caplog.text


@pytest.mark.parametrize("content, message", [
    ("y,t\n1.0,\n", "row 1, column 't'"),
    ("y,t\n1.0,inf\n", "row 1, column 't'"),
    ("y,x\n1.0,2.0\n", "Columns not in the header"),
    ("y,t\n1.0,2#5\n", "row 1, column 't'"),
])
def test_load_csv_errors(tmp_path, content, message):
    (tmp_path / "data.csv").write_text(content, encoding="utf-8")
    with pytest.raises(InputError, match=message):
        cli.load_csv(tmp_path / "data.csv", ["y", "t"])


def test_load_csv_skips_stamp(tmp_path):
    (tmp_path / "data.csv").write_text("# seed=1\n#demo\ny,t,unused\n1.5, 2\t,a#b\n", encoding="utf-8")
    frame = cli.load_csv(tmp_path / "data.csv", ["y", "t"])
    assert frame.to_dict(orient="list") == {"y": [1.5], "t": [2.0]}


@pytest.mark.parametrize("obj", [
    {"data": "d.csv", "outcome": "y", "exposure": "t", "chain": 2},
    {"data": "d.csv", "outcome": "y", "exposure": "t", "model": {"variant": "npivbart-h", "trees": 5}},
    {"data": "d.csv", "outcome": "y", "exposure": "t", "model": {"variant": "ols"}},
    {"data": "d.csv", "outcome": "y", "exposure": "y"},
    {"data": "d.csv", "outcome": "y"},
])
def test_fit_config_errors(obj):
    with pytest.raises(ConfigError):
        FitConfig.from_dict(obj)


def test_fit_config(tmp_path):
    config = FitConfig.from_dict({"data": "d.csv", "outcome": "y", "exposure": "t", "covariates": ["age", "sex"],
                                  "model": {"variant": "npivbart-g", "k_stage2": 3},
                                  "grid": {"t_points": [0, 1], "profiles": [{"sex": 1}]}, "draws": 7}, tmp_path)
    assert config.data == tmp_path / "d.csv"
    assert config.model.variant is Variant.NPIVBART_G
    assert config.model.k_stage2 == 3
    grid = config.eval_grid()
    assert grid.profiles == ({1: 1.0},)
    assert grid.t_points == (0.0, 1.0)
    mcmc = config.mcmc(parallel=2)
    assert mcmc.draws == 7
    assert mcmc.parallel == 2

    bad_grid = FitConfig.from_dict({"data": "d.csv", "outcome": "y", "exposure": "t", "covariates": ["age"],
                                    "grid": {"profiles": [{"height": 1}]}})
    with pytest.raises(ConfigError, match="height"):
        bad_grid.eval_grid()


def test_unknown_keys_exit_code(tmp_path):
    path = _write_json(tmp_path / "fit.json", {"data": "d.csv", "outcome": "y", "exposure": "t", "burnin": 5})
    assert cli.main(["fit", "--config", str(path)]) == 2
    path = _write_json(tmp_path / "study.json", {"scenarios": [{"truth": "linear-g"}], "reps": 5})
    assert cli.main(["simulate", "--config", str(path), "--output", str(tmp_path / "out")]) == 2


def test_parallel_environment(tmp_path, monkeypatch):
    path = _write_json(tmp_path / "fit.json", {"data": "d.csv", "outcome": "y", "exposure": "t"})
    monkeypatch.setenv(cli.PARALLEL_ENV, "many")
    assert cli.main(["fit", "--config", str(path)]) == 2


def test_summarize(fit_setup, capsys):
    tmp_path, config = fit_setup
    path = _write_json(tmp_path / "fit.json", config)
    assert cli.main(["fit", "--config", str(path)]) == 0
    capsys.readouterr()

    draws = str(tmp_path / "out" / "draws.jsonl")
    assert cli.main(["summarize", draws, "--json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["schema"] == SCHEMA_VERSION
    assert report["seed"] == 5
    pooled = [row for row in report["summary"] if row["chain"] == "pooled"]
    assert [row["quantity"] for row in pooled] == ["beta", "rho_mean"]
    assert all(row["n"] == 6 for row in pooled)

    out = io.StringIO()
    assert cli.cmd_summarize(draws, out=out) == 0
    assert out.getvalue().startswith("# ivbart-g draws=6 chains=2")

    assert cli.main(["summarize", str(tmp_path / "missing.jsonl")]) == 2
    assert cli.main(["summarize", str(tmp_path / "data.csv")]) == 2


def test_simulate(tmp_path):
    path = _write_json(tmp_path / "study.json", {
        "name": "smoke",
        "seed": 1,
        "replications": 1,
        "scenarios": [{"truth": "linear-g", "rho": 0.7, "C": 1.0, "n": 200}],
        "methods": ["2sls"],
    })
    assert cli.main(["simulate", "--config", str(path), "--output", str(tmp_path / "a")]) == 0
    rmse, stamp = read_table(tmp_path / "a" / "rmse_table.csv")
    assert rmse["profile"].tolist() == ["x1=-0.5", "x1=+0.5"]
    assert stamp["seed"] == "1"

    assert cli.main(["simulate", "--config", str(path), "--output", str(tmp_path / "b"), "--seed", "8"]) == 0
    manifest = json.loads((tmp_path / "b" / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["seeds"] == [8]


@pytest.mark.slow
def test_chain_count_keeps_summaries_consistent(tmp_path):
    write_dataset(SimScenario("linear-g", rho=0.5, n=300, n_snps=5, n_x=2, seed=2), 0, tmp_path / "data.csv")
    base = {
        "data": "data.csv",
        "outcome": "y",
        "exposure": "t",
        "instruments": ["z1", "z2", "z3", "z4", "z5"],
        "covariates": ["x1", "x2"],
        "model": {"variant": "ivbart-g", "H_t": 10, "H_y": 10},
        "burn_in": 200,
        "seed": 5,
        "grid": {"profiles": [{"x1": -0.5}, {"x1": 0.5}]},
    }
    reports = {}
    for chains, draws in ((1, 900), (3, 300)):
        path = _write_json(tmp_path / f"fit{chains}.json", {**base, "chains": chains, "draws": draws,
                                                             "output": f"out{chains}"})
        assert cli.main(["fit", "--config", str(path)]) == 0
        reports[chains] = json.loads((tmp_path / f"out{chains}" / "summary.json").read_text(encoding="utf-8"))

    single, multi = reports[1]["partial_dependence"], reports[3]["partial_dependence"]
    assert [(r["profile"], r["t"]) for r in single] == [(r["profile"], r["t"]) for r in multi]
    differences = [abs(a["mean"] - b["mean"]) for a, b in zip(single, multi)]
    assert sum(differences) / len(differences) < 0.05
    for a, b in zip(single, multi):
        assert a["lower"] <= b["upper"] and b["lower"] <= a["upper"]

    pooled = {chains: [r for r in report["scalars"] if r["chain"] == "pooled"] for chains, report in reports.items()}
    assert [r["n"] for r in pooled[1]] == [r["n"] for r in pooled[3]] == [900, 900]
    assert {r["chain"] for r in reports[3]["scalars"]} == {"0", "1", "2", "pooled"}
    beta = {chains: rows[0] for chains, rows in pooled.items()}
    assert beta[3]["rhat"] < 1.1
    assert beta[1]["mean"] == pytest.approx(beta[3]["mean"], abs=0.05)

import csv
import json

import pytest
from click.testing import CliRunner

from fkpm.api.cli import cli, parse_grid


@pytest.fixture
def runner(isolated_settings):
    return CliRunner()


@pytest.fixture
def hmm4_file(runner, tmp_path):
    out = tmp_path / "hmm4.json"
    result = runner.invoke(cli, ["zoo", "emit", "hmm4", "--out", str(out)])
    assert result.exit_code == 0, result.output
    return out


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_parse_grid():
    assert parse_grid("0:1:0.5") == [0.0, 0.5, 1.0]
    assert parse_grid("1,2.5") == [1.0, 2.5]


def test_zoo_list(runner):
    result = runner.invoke(cli, ["zoo", "list"])
    assert result.exit_code == 0
    assert "hmm4" in result.output
    assert "saw_2d" in result.output


def test_zoo_emit_writes_sidecar(hmm4_file):
    assert hmm4_file.with_name("hmm4.oracle.json").is_file()
    assert json.loads(hmm4_file.read_text())["horizon"] == 10


def test_zoo_emit_sampled_model_fails(runner, tmp_path):
    result = runner.invoke(cli, ["zoo", "emit", "saw_2d", "--out", str(tmp_path / "saw.json")])
    assert result.exit_code == 2
    assert "UnsupportedSpace" in result.output


def test_analyze_and_bounds(runner, hmm4_file, tmp_path):
    profile = tmp_path / "profile.json"
    result = runner.invoke(cli, ["analyze", "--model", str(hmm4_file), "--horizon", "4", "--out", str(profile)])
    assert result.exit_code == 0, result.output
    doc = json.loads(profile.read_text())
    assert doc["horizon"] == 4
    assert {c["kind"] for c in doc["certificates"]} == {"H0", "Hm"}

    table = tmp_path / "bounds.csv"
    result = runner.invoke(
        cli,
        ["bounds", "--cert", str(profile), "--which", "marginal", "--N", "100", "--n", "4",
         "--x-grid", "0:2:0.5", "--out", str(table)],
    )
    assert result.exit_code == 0, result.output
    rows = _rows(table)
    assert [float(r["x"]) for r in rows] == [0.0, 0.5, 1.0, 1.5, 2.0]
    assert all(float(r["bound"]) > 0 for r in rows)
    assert float(rows[0]["prob_floor"]) == 0.0


def test_run_and_smooth(runner, hmm4_file, tmp_path):
    out = tmp_path / "run.csv"
    run_dir = tmp_path / "stored"
    result = runner.invoke(
        cli,
        ["run", "--model", str(hmm4_file), "--n-particles", "32", "--seed", "4",
         "--retain-genealogy", "--run-dir", str(run_dir), "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    rows = _rows(out)
    assert [int(r["step"]) for r in rows] == list(range(11))
    assert float(rows[0]["log_Z_hat"]) == 0.0
    assert (run_dir / "trajectory.npz").is_file()
    assert json.loads((run_dir / "run.json").read_text())["catalog_id"] == 1

    additive = tmp_path / "additive.json"
    additive.write_text(json.dumps({"components": "scaled_index"}))
    smoothed = tmp_path / "smoothed.csv"
    result = runner.invoke(
        cli, ["smooth", "--run", str(run_dir), "--functional", str(additive), "--out", str(smoothed)]
    )
    assert result.exit_code == 0, result.output
    (row,) = _rows(smoothed)
    assert 0.0 <= float(row["estimate"]) <= 1.0
    assert int(row["N"]) == 32


def test_run_without_genealogy_cannot_be_smoothed(runner, tmp_path):
    out = tmp_path / "run.csv"
    result = runner.invoke(cli, ["run", "--model", "hmm4", "--n-particles", "8", "--out", str(out)])
    assert result.exit_code == 0, result.output
    empty = tmp_path / "empty"
    empty.mkdir()
    additive = tmp_path / "additive.json"
    additive.write_text(json.dumps({"components": "scaled_index"}))
    result = runner.invoke(
        cli, ["smooth", "--run", str(empty), "--functional", str(additive), "--out", str(tmp_path / "s.csv")]
    )
    assert result.exit_code == 2


def test_invalid_model_exits_with_domain_error(runner, tmp_path):
    broken = tmp_path / "broken.json"
    broken.write_text(json.dumps({"horizon": 1, "states": [0], "eta0": [1.0], "kernels": [], "potentials": [1.0]}))
    result = runner.invoke(cli, ["run", "--model", str(broken), "--n-particles", "4", "--out", str(tmp_path / "r.csv")])
    assert result.exit_code == 2
    assert "InvalidModel" in result.output


def test_experiment_command(runner, tmp_path):
    config = tmp_path / "config.json"
    config.write_text(
        json.dumps(
            {"model": "hmm4", "n_particles": [50], "replicates": 10, "seed": 2,
             "bound": "marginal", "x_grid": [1.0]}
        )
    )
    out = tmp_path / "experiment"
    result = runner.invoke(cli, ["experiment", "--config", str(config), "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert "verdict: PASS" in result.output
    assert {p.name for p in out.iterdir()} == {"runs.csv", "coverage.csv", "report.txt"}

"""Tests for the command-line interface."""

import json

import numpy as np
import pytest
from typer.testing import CliRunner

from tensorar import app
from tensorar.least_squares import build_design, fit_ols
from tensorar.tensor_io import read_model, read_series, read_tensor, write_tensor

runner = CliRunner()


@pytest.fixture(autouse=True)
def single_thread(monkeypatch, tmp_path):
    monkeypatch.setenv("TENSORAR_THREADS", "1")
    monkeypatch.setenv("TENSORAR_LOG_LEVEL", "WARNING")
    monkeypatch.chdir(tmp_path)


@pytest.fixture
def series_file(tmp_path):
    path = tmp_path / "series.tsr"
    result = runner.invoke(
        app,
        ["simulate", "--dims", "2,2", "--ranks", "1,1,1,1", "--T", "80", "--seed", "4", "--out", str(path)],
    )
    assert result.exit_code == 0, result.output
    return path


def test_version():
    """Test version command."""
    result = runner.invoke(app, ["version"])

    assert result.exit_code == 0
    assert "tensorar" in result.output


def test_simulate_writes_series_and_model(series_file, tmp_path):
    """Test simulate output files."""
    series = read_series(series_file)
    model = read_model(tmp_path / "series.model.json")

    assert series.length == 80
    assert series.dims == (2, 2)
    assert model.tucker is not None
    assert model.tucker.ranks == (1, 1, 1, 1)


def test_simulate_is_reproducible(series_file, tmp_path):
    """Test that the same seed writes the same bytes."""
    again = tmp_path / "again.tsr"
    result = runner.invoke(
        app,
        ["simulate", "--dims", "2,2", "--ranks", "1,1,1,1", "--T", "80", "--seed", "4", "--out", str(again)],
    )

    assert result.exit_code == 0
    assert again.read_bytes() == series_file.read_bytes()


def test_simulate_rejects_bad_ranks(tmp_path):
    """Test exit code 2 on invalid ranks."""
    result = runner.invoke(
        app, ["simulate", "--dims", "2,2", "--ranks", "3,1,1,1", "--T", "10", "--out", str(tmp_path / "x")]
    )

    assert result.exit_code == 2


def test_fit_ols_matches_library(series_file, tmp_path):
    """Test that fit writes the estimate and a diagnostics report."""
    out = tmp_path / "ols.tsr"
    result = runner.invoke(app, ["fit", "--series", str(series_file), "--estimator", "OLS", "--out", str(out)])

    assert result.exit_code == 0, result.output
    expected = fit_ols(build_design(read_series(series_file))).estimate
    assert np.array_equal(read_tensor(out), expected)
    report = json.loads((tmp_path / "ols.json").read_text())
    assert report["estimator"] == "OLS"
    assert report["converged"] is True


def test_fit_regularized_with_grid(series_file, tmp_path):
    """Test BIC tuning and the lambda table in the report."""
    out = tmp_path / "tssn.tsr"
    report = tmp_path / "tssn-report.json"
    result = runner.invoke(
        app,
        [
            "fit", "--series", str(series_file), "--estimator", "tssn",
            "--lambda-grid", "0.5,0.1", "--out", str(out), "--report", str(report),
        ],
    )

    assert result.exit_code == 0, result.output
    data = json.loads(report.read_text())
    assert data["estimator"] == "TSSN"
    assert [row["lam"] for row in data["lambda_table"]] == [0.5, 0.1]
    assert data["lambda"] in (0.5, 0.1)
    assert data["gamma"] == pytest.approx(data["lambda"] / 2)
    assert read_tensor(out).shape == (2, 2, 2, 2)


def test_fit_from_config_file(series_file, tmp_path):
    """Test that a config file supplies the options."""
    config = tmp_path / "fit.cfg"
    config.write_text(
        f"series={series_file}\nestimator=LTR\nranks=1,1,1,1\nout={tmp_path / 'ltr.tsr'}\n"
    )
    result = runner.invoke(app, ["fit", "--config", str(config)])

    assert result.exit_code == 0, result.output
    assert (tmp_path / "ltr.tsr").exists()


def test_fit_missing_series(tmp_path):
    """Test exit code 2 when the series file does not exist."""
    result = runner.invoke(
        app, ["fit", "--series", str(tmp_path / "none.tsr"), "--estimator", "OLS", "--out", "x.tsr"]
    )

    assert result.exit_code == 2


def test_fit_rank_deficient_series(tmp_path):
    """Test exit code 2 on a fit error."""
    path = tmp_path / "short.tsr"
    runner.invoke(
        app, ["simulate", "--dims", "3,3", "--ranks", "1,1,1,1", "--T", "4", "--out", str(path)]
    )
    result = runner.invoke(app, ["fit", "--series", str(path), "--estimator", "OLS", "--out", "x.tsr"])

    assert result.exit_code == 2
    assert "rank" in result.output


def test_forecast_with_model_and_estimator(series_file, tmp_path):
    """Test oracle and refitted rolling forecasts."""
    oracle = tmp_path / "oracle.csv"
    result = runner.invoke(
        app,
        [
            "forecast", "--series", str(series_file), "--model", str(tmp_path / "series.model.json"),
            "--start", "70", "--out", str(oracle),
        ],
    )
    assert result.exit_code == 0, result.output
    summary = json.loads((tmp_path / "oracle.json").read_text())
    assert summary["origins"] == 11
    assert summary["missing"] == 0
    assert summary["zero_mean_l2"] > 0

    refit = tmp_path / "ols.csv"
    result = runner.invoke(
        app,
        ["forecast", "--series", str(series_file), "--estimator", "OLS", "--start", "75", "--out", str(refit)],
    )
    assert result.exit_code == 0, result.output
    assert len(refit.read_text().splitlines()) == 1 + 6


def test_forecast_needs_one_source(series_file):
    """Test exit code 2 without an estimator or model."""
    result = runner.invoke(app, ["forecast", "--series", str(series_file), "--start", "10", "--out", "f.csv"])

    assert result.exit_code == 2


def test_bench_experiment_case(tmp_path):
    """Test a reduced run of an experiment case."""
    result = runner.invoke(
        app, ["bench", "--case", "1a", "--reps", "1", "--T", "40", "--out-dir", str(tmp_path / "res")]
    )

    assert result.exit_code == 0, result.output
    table = (tmp_path / "res" / "bench_1a.csv").read_text().splitlines()
    assert table[0] == "case,estimator,T,replication,fro_error,sq_error,runtime_s"
    assert len(table) == 1 + 3
    summary = json.loads((tmp_path / "res" / "bench_1a.json").read_text())
    assert summary["metadata"]["case"] == "1a"
    assert len(summary["cells"]) == 3


def test_bench_unknown_case(tmp_path):
    """Test exit code 2 and the list of valid cases."""
    result = runner.invoke(app, ["bench", "--case", "zz", "--out-dir", str(tmp_path)])

    assert result.exit_code == 2
    assert "1a" in result.output


def test_ingest_and_export(tmp_path):
    """Test CSV conversion in both directions."""
    csv = tmp_path / "panel.csv"
    csv.write_text("1,2,3,4\n5,6,7,8\n")
    out = tmp_path / "panel.tsr"
    result = runner.invoke(app, ["ingest", "--csv", str(csv), "--dims", "2,2", "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert read_series(out).observations[1].tolist() == [[5.0, 7.0], [6.0, 8.0]]

    back = tmp_path / "back.csv"
    result = runner.invoke(app, ["export", "--series", str(out), "--out", str(back)])
    assert result.exit_code == 0, result.output
    assert back.read_text().splitlines() == ["1.0,2.0,3.0,4.0", "5.0,6.0,7.0,8.0"]


def test_ingest_column_mismatch(tmp_path):
    """Test exit code 2 on a malformed panel."""
    csv = tmp_path / "panel.csv"
    csv.write_text("1,2,3\n")
    result = runner.invoke(app, ["ingest", "--csv", str(csv), "--dims", "2,2", "--out", "p.tsr"])

    assert result.exit_code == 2


def test_diff_tensor(tmp_path):
    """Test differences and the tolerance exit code."""
    a, b = tmp_path / "a.tsr", tmp_path / "b.tsr"
    write_tensor(a, np.zeros((2, 2)))
    write_tensor(b, np.full((2, 2), 0.5))

    result = runner.invoke(app, ["diff-tensor", str(a), str(b)])
    assert result.exit_code == 0
    assert "max_abs_diff=0.5" in result.output
    assert "fro_diff=1.0" in result.output

    assert runner.invoke(app, ["diff-tensor", str(a), str(b), "--tol", "0.1"]).exit_code == 1
    assert runner.invoke(app, ["diff-tensor", str(a), str(b), "--tol", "1"]).exit_code == 0
    assert runner.invoke(app, ["diff-tensor", str(a), str(tmp_path / "c.tsr")]).exit_code == 2


def test_invalid_environment_settings(monkeypatch):
    """Test exit code 2 on invalid settings."""
    monkeypatch.setenv("TENSORAR_THREADS", "zero")
    result = runner.invoke(app, ["version"])

    assert result.exit_code == 2


@pytest.mark.slow
def test_pipeline_beats_zero_forecast(tmp_path):
    """simulate, fit and forecast run end to end and beat the zero forecast."""
    path = tmp_path / "s.tsr"
    args = ["simulate", "--dims", "3,3", "--ranks", "1,1,1,1", "--T", "300", "--seed", "2", "--out", str(path)]
    assert runner.invoke(app, args).exit_code == 0
    fit = runner.invoke(
        app, ["fit", "--series", str(path), "--estimator", "TSSN", "--gamma", "auto", "--out", "a.tsr"]
    )
    assert fit.exit_code == 0, fit.output
    first = (tmp_path / "a.tsr").read_bytes()
    runner.invoke(app, ["fit", "--series", str(path), "--estimator", "TSSN", "--out", "a.tsr"])
    assert (tmp_path / "a.tsr").read_bytes() == first

    result = runner.invoke(
        app,
        ["forecast", "--series", str(path), "--estimator", "TSSN", "--lambda", "0.1",
         "--start", "290", "--out", "f.csv"],
    )
    assert result.exit_code == 0, result.output
    summary = json.loads((tmp_path / "f.json").read_text())
    assert summary["mean_l2"] < summary["zero_mean_l2"]

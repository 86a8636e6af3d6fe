"""Command-line interface."""

import json
import logging
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
import typer
from pydantic import ValidationError

from . import evaluation
from .config import load_run_config, load_settings
from .least_squares import build_design, fit_rrr
from .lrtar_model import make_dgp, simulate as simulate_series
from .models import (
    REGULARIZED_ESTIMATORS,
    BenchConfig,
    Estimator,
    ExportConfig,
    FitConfig,
    FitReport,
    ForecastConfig,
    IngestConfig,
    InvalidConfiguration,
    MissingConfiguration,
    Penalty,
    RegOptions,
    Settings,
    SimulateConfig,
    TensorARError,
)
from .regularized import fit_by_name, fit_tssn, select_lambda_bic
from .tensor_io import (
    read_csv_series,
    read_model,
    read_series,
    read_tensor,
    write_csv_series,
    write_model,
    write_series,
    write_tensor,
)

logger = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_IO = 3

app = typer.Typer(
    name="tensorar",
    help="Low-rank tensor autoregression: simulate, fit, forecast and benchmark",
)


def setup_logging(log_level: str) -> None:
    """
    Setup logging configuration.

    Args:
        log_level: Log level (DEBUG, INFO, WARNING, ERROR)
    """
    logging.basicConfig(
        level=getattr(logging, log_level),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )


def _execute(command: Callable[[], None]) -> None:
    """Run a command body and map failures to exit codes."""
    try:
        command()
    except (
        InvalidConfiguration,
        MissingConfiguration,
        ValidationError,
        TensorARError,
    ) as e:
        typer.secho(f"Error: {e}", fg=typer.colors.RED, err=True)
        raise typer.Exit(EXIT_USAGE)
    except OSError as e:
        typer.secho(f"I/O error: {e}", fg=typer.colors.RED, err=True)
        raise typer.Exit(EXIT_IO)


def _settings(ctx: typer.Context) -> Settings:
    return ctx.obj if isinstance(ctx.obj, Settings) else Settings()


def _write_json(path: Path, data: dict[str, Any]) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


ConfigOption = typer.Option(None, "--config", help="key=value file; flags override it")


@app.callback()
def configure(
    ctx: typer.Context,
    env_file: Optional[Path] = typer.Option(None, "--env-file", help="Path to .env file"),
) -> None:
    """Load settings from the environment and set up logging."""
    try:
        settings = load_settings(str(env_file) if env_file else None)
    except InvalidConfiguration as e:
        typer.secho(f"Error: {e}", fg=typer.colors.RED, err=True)
        raise typer.Exit(EXIT_USAGE)
    setup_logging(settings.log_level)
    ctx.obj = settings


@app.command()
def simulate(
    dims: Optional[str] = typer.Option(None, "--dims", help="Observation dims, e.g. 5,5"),
    ranks: Optional[str] = typer.Option(None, "--ranks", help="Tucker ranks r_1..r_2d"),
    T: Optional[int] = typer.Option(None, "--T", help="Series length"),
    burn_in: Optional[int] = typer.Option(None, "--burn-in"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    out: Optional[Path] = typer.Option(None, "--out", help="Series file to write"),
    model_out: Optional[Path] = typer.Option(
        None, "--model-out", help="Model file (default: <out>.model.json)"
    ),
    binary: Optional[bool] = typer.Option(None, "--binary/--text"),
    config: Optional[Path] = ConfigOption,
) -> None:
    """Draw a random low-rank model and simulate a series from it."""

    def command() -> None:
        cfg = load_run_config(
            SimulateConfig,
            config,
            {
                "dims": dims, "ranks": ranks, "T": T, "burn_in": burn_in, "seed": seed,
                "out": out, "model_out": model_out, "binary": binary,
            },
        )
        model = make_dgp(cfg.dims, cfg.ranks, seed=cfg.seed)
        series = simulate_series(model, cfg.T, burn_in=cfg.burn_in, seed=cfg.seed)
        write_series(cfg.out, series, binary=cfg.binary)
        model_path = cfg.model_out or cfg.out.with_suffix(".model.json")
        write_model(model_path, model)
        typer.echo(f"Wrote {cfg.out} (dims={cfg.dims}, T={cfg.T}) and {model_path}")

    _execute(command)


def _fit_report_json(fit: FitReport, table: Optional[list[dict[str, Any]]]) -> dict[str, Any]:
    return {
        "estimator": str(fit.estimator),
        "ranks": list(fit.ranks) if fit.ranks is not None else None,
        "objective_trace": fit.objective_trace,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "elapsed": fit.elapsed,
        "lambda": fit.lam,
        "gamma": fit.gamma,
        "floored_modes": list(fit.floored_modes),
        "lambda_table": table,
    }


def _penalty_of(estimator: Estimator) -> Penalty:
    return {Estimator.SN: Penalty.SN, Estimator.MN: Penalty.MN}.get(estimator, Penalty.SSN)


@app.command()
def fit(
    series: Optional[Path] = typer.Option(None, "--series", help="Input series file"),
    estimator: Optional[str] = typer.Option(None, "--estimator", help="OLS|RRR|LTR|SN|MN|SSN|TSSN"),
    ranks: Optional[str] = typer.Option(
        None, "--ranks", help="Tucker ranks (LTR, RRR) or a single matrix rank (RRR)"
    ),
    lam: Optional[float] = typer.Option(None, "--lambda", help="Fixed tuning parameter"),
    lambda_grid: Optional[str] = typer.Option(None, "--lambda-grid", help="BIC grid"),
    rho: Optional[float] = typer.Option(None, "--rho"),
    adapt_rho: Optional[bool] = typer.Option(
        None, "--adapt-rho/--fixed-rho", help="Balance residuals by rescaling rho early on"
    ),
    relax: Optional[float] = typer.Option(None, "--relax", help="ADMM relaxation in [1, 2)"),
    max_iter: Optional[int] = typer.Option(None, "--max-iter"),
    tol: Optional[float] = typer.Option(None, "--tol"),
    gamma: Optional[str] = typer.Option(None, "--gamma", help="TSSN threshold or 'auto'"),
    out: Optional[Path] = typer.Option(None, "--out", help="Estimate file to write"),
    report: Optional[Path] = typer.Option(
        None, "--report", help="Diagnostics JSON (default: <out>.json)"
    ),
    binary: Optional[bool] = typer.Option(None, "--binary/--text"),
    config: Optional[Path] = ConfigOption,
) -> None:
    """Fit an estimator to a series and store the estimate with diagnostics."""

    def command() -> None:
        cfg = load_run_config(
            FitConfig,
            config,
            {
                "series": series, "estimator": estimator, "ranks": ranks, "lam": lam,
                "lambda_grid": lambda_grid, "rho": rho, "adapt_rho": adapt_rho, "relax": relax,
                "max_iter": max_iter, "tol": tol,
                "gamma": gamma, "out": out, "report": report, "binary": binary,
            },
        )
        design = build_design(read_series(cfg.series))
        table = None
        if cfg.estimator in REGULARIZED_ESTIMATORS:
            opts = RegOptions(
                lam=cfg.lam,
                lambda_grid=cfg.lambda_grid,
                rho=cfg.rho,
                adapt_rho=cfg.adapt_rho,
                relax=cfg.relax,
                max_iter=cfg.max_iter,
                tol_primal=cfg.tol,
                tol_dual=cfg.tol,
                gamma=None if cfg.gamma in (None, "auto") else float(cfg.gamma),
            )
            if opts.lam is None:
                selection = select_lambda_bic(
                    design, opts=opts, penalty=_penalty_of(cfg.estimator)
                )
                table = [row.model_dump() for row in selection.table]
                result = selection.fit
                if cfg.estimator == Estimator.TSSN:
                    tuned = opts.model_copy(update={"lam": selection.lam})
                    result = fit_tssn(design, tuned, init=selection.fit.estimate)
            else:
                result = fit_by_name(design, cfg.estimator, opts)
        elif cfg.estimator == Estimator.RRR and cfg.ranks is not None and len(cfg.ranks) == 1:
            result = fit_rrr(design, cfg.ranks[0])
        else:
            result = evaluation.fit_estimator(design, cfg.estimator, cfg.ranks)

        write_tensor(cfg.out, result.estimate, binary=cfg.binary)
        report_path = cfg.report or cfg.out.with_suffix(".json")
        _write_json(report_path, _fit_report_json(result, table))
        if not result.converged:
            typer.secho(f"{result.estimator} did not converge", fg=typer.colors.YELLOW, err=True)
        typer.echo(f"Wrote {cfg.out} and {report_path}")

    _execute(command)


@app.command()
def forecast(
    series: Optional[Path] = typer.Option(None, "--series", help="Input series file"),
    estimator: Optional[str] = typer.Option(None, "--estimator", help="Estimator refitted per origin"),
    model: Optional[Path] = typer.Option(None, "--model", help="Fixed model file (oracle)"),
    ranks: Optional[str] = typer.Option(None, "--ranks"),
    lam: Optional[float] = typer.Option(None, "--lambda"),
    start: Optional[int] = typer.Option(None, "--start", help="First origin t0 (1-based)"),
    retune_every: Optional[int] = typer.Option(None, "--retune-every"),
    out: Optional[Path] = typer.Option(None, "--out", help="Per-origin CSV"),
    summary: Optional[Path] = typer.Option(
        None, "--summary", help="Summary JSON (default: <out>.json)"
    ),
    config: Optional[Path] = ConfigOption,
) -> None:
    """Rolling one-step-ahead forecasts with an expanding window."""

    def command() -> None:
        cfg = load_run_config(
            ForecastConfig,
            config,
            {
                "series": series, "estimator": estimator, "model": model, "ranks": ranks,
                "lam": lam, "start": start, "retune_every": retune_every, "out": out,
                "summary": summary,
            },
        )
        data = read_series(cfg.series)
        if cfg.model is not None:
            fixed = read_model(cfg.model)
            if fixed.dims != data.dims:
                raise InvalidConfiguration(
                    f"model dims {fixed.dims} do not match series dims {data.dims}"
                )
            report = evaluation.rolling_forecast(
                data, cfg.start, fixed_transition=fixed.transition
            )
        else:
            report = evaluation.rolling_forecast(
                data,
                cfg.start,
                estimator=cfg.estimator,
                ranks=cfg.ranks,
                reg_opts=RegOptions(lam=cfg.lam),
                retune_every=cfg.retune_every,
            )
        zero = evaluation.rolling_forecast(
            data, cfg.start, fixed_transition=np.zeros(data.dims + data.dims)
        )
        evaluation.forecast_table(report).to_csv(cfg.out, index=False)
        summary_path = cfg.summary or cfg.out.with_suffix(".json")
        _write_json(
            summary_path,
            {
                "origins": len(report.points),
                "horizon": report.horizon,
                "mean_l2": report.mean_l2,
                "mean_linf": report.mean_linf,
                "missing": report.missing,
                "zero_mean_l2": zero.mean_l2,
                "zero_mean_linf": zero.mean_linf,
            },
        )
        typer.echo(
            f"mean l2 {report.mean_l2:.6g} (zero forecast {zero.mean_l2:.6g}), "
            f"mean linf {report.mean_linf:.6g}, missing {report.missing}"
        )

    _execute(command)


@app.command()
def bench(
    ctx: typer.Context,
    case: Optional[str] = typer.Option(None, "--case", help="Case name: 1a..4b or a..h"),
    reps: Optional[int] = typer.Option(None, "--reps"),
    T_grid: Optional[str] = typer.Option(None, "--T", help="Sample sizes, e.g. 400,800"),
    ranks: Optional[str] = typer.Option(None, "--ranks"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    out_dir: Optional[Path] = typer.Option(None, "--out-dir"),
    config: Optional[Path] = ConfigOption,
) -> None:
    """Run a named simulation study and write its CSV table and JSON summary."""

    def command() -> None:
        cfg = load_run_config(
            BenchConfig,
            config,
            {
                "case": case, "reps": reps, "T_grid": T_grid, "ranks": ranks,
                "seed": seed, "out_dir": out_dir,
            },
        )
        if cfg.case not in evaluation.CASES:
            raise InvalidConfiguration(
                f"unknown case {cfg.case!r}; valid cases: {', '.join(evaluation.CASES)}"
            )
        threads = _settings(ctx).threads
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        table_path = cfg.out_dir / f"bench_{cfg.case}.csv"
        summary_path = cfg.out_dir / f"bench_{cfg.case}.json"
        metadata: dict[str, Any] = {"case": cfg.case, "replications": cfg.reps, "root_seed": cfg.seed}

        if cfg.case in evaluation.EXPERIMENT_CASES:
            spec = evaluation.experiment_spec(
                cfg.case, cfg.reps, cfg.seed, sample_sizes=cfg.T_grid, ranks=cfg.ranks
            )
            table = evaluation.run_experiment(spec, threads=threads)
            table.to_csv(table_path, index=False)
            metadata |= {"dims": list(spec.dims), "ranks": list(spec.ranks)}
            _write_json(summary_path, evaluation.experiment_summary(table, metadata))
        else:
            update: dict[str, Any] = {}
            if cfg.ranks is not None:
                update["ranks"] = cfg.ranks
            if cfg.T_grid is not None:
                if len(cfg.T_grid) != 1:
                    raise InvalidConfiguration("scaling cases take a single --T value")
                update["T"] = cfg.T_grid[0]
            points = [p.model_copy(update=update) for p in evaluation.SCALING_CASES[cfg.case]]
            study = evaluation.error_scaling_study(
                cfg.case, cfg.reps, cfg.seed, threads=threads, points=points
            )
            study.to_csv(table_path, index=False)
            rows = study.astype(object).where(study.notna(), None).to_dict(orient="records")
            _write_json(summary_path, {"metadata": metadata, "points": rows})
        typer.echo(f"Wrote {table_path} and {summary_path}")

    _execute(command)


@app.command()
def ingest(
    csv: Optional[Path] = typer.Option(None, "--csv", help="Panel with T rows and prod(dims) columns"),
    dims: Optional[str] = typer.Option(None, "--dims"),
    out: Optional[Path] = typer.Option(None, "--out"),
    demean: Optional[bool] = typer.Option(None, "--demean/--no-demean"),
    header: Optional[bool] = typer.Option(None, "--header/--no-header"),
    binary: Optional[bool] = typer.Option(None, "--binary/--text"),
    config: Optional[Path] = ConfigOption,
) -> None:
    """Convert a CSV panel into a series file (columns in canonical vec order)."""

    def command() -> None:
        cfg = load_run_config(
            IngestConfig,
            config,
            {
                "csv": csv, "dims": dims, "out": out, "demean": demean,
                "header": header, "binary": binary,
            },
        )
        data = read_csv_series(cfg.csv, cfg.dims, header=cfg.header, demean=cfg.demean)
        write_series(cfg.out, data, binary=cfg.binary)
        typer.echo(f"Wrote {cfg.out} (dims={data.dims}, T={data.length})")

    _execute(command)


@app.command()
def export(
    series: Optional[Path] = typer.Option(None, "--series"),
    out: Optional[Path] = typer.Option(None, "--out"),
    config: Optional[Path] = ConfigOption,
) -> None:
    """Write a series file back to a CSV panel."""

    def command() -> None:
        cfg = load_run_config(ExportConfig, config, {"series": series, "out": out})
        write_csv_series(cfg.out, read_series(cfg.series))
        typer.echo(f"Wrote {cfg.out}")

    _execute(command)


@app.command("diff-tensor")
def diff_tensor(
    first: Path = typer.Argument(..., help="Tensor file"),
    second: Path = typer.Argument(..., help="Tensor file"),
    tol: Optional[float] = typer.Option(None, "--tol", help="Exit 1 when max abs diff exceeds it"),
) -> None:
    """Compare two tensor files entrywise."""
    outcome: dict[str, float] = {}

    def command() -> None:
        for path in (first, second):
            if not path.is_file():
                raise MissingConfiguration(f"tensor file {path} not found")
        a, b = read_tensor(first), read_tensor(second)
        if a.shape != b.shape:
            raise InvalidConfiguration(f"tensor dims differ: {a.shape} vs {b.shape}")
        outcome["max_abs"] = float(np.abs(a - b).max())
        outcome["fro"] = float(np.linalg.norm(a - b))
        typer.echo(f"max_abs_diff={outcome['max_abs']!r} fro_diff={outcome['fro']!r}")

    _execute(command)
    if tol is not None and outcome["max_abs"] > tol:
        raise typer.Exit(1)


@app.command()
def version() -> None:
    """Show version information."""
    typer.echo("tensorar v0.1.0")


def main() -> None:
    """Main entry point."""
    app()

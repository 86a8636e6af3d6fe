"""Simulation studies and rolling-origin forecast evaluation."""

import logging
import math
import time
from functools import partial
from typing import Any, Optional, Sequence

import numpy as np
import pandas as pd

from .least_squares import build_design, fit_ltr, fit_ols, fit_rrr, matrix_rank_bound
from .lrtar_model import make_dgp, response_modes, simulate
from .models import (
    AlsOptions,
    CellResult,
    DimensionError,
    Estimator,
    ExperimentSpec,
    FitReport,
    ForecastPoint,
    ForecastReport,
    InvalidArgument,
    LrtarModel,
    Penalty,
    RegOptions,
    RegressionDesign,
    REGULARIZED_ESTIMATORS,
    ScalingPoint,
    TensorSeries,
)
from .orchestrator import run_cells
from .regularized import fit_by_name, select_lambda_bic, square_mode_sets
from .tensor_core import matricize

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["case", "estimator", "T", "replication", "fro_error", "sq_error", "runtime_s"]
DEFAULT_RETUNE_EVERY = 12

LOW_DIMENSIONAL = (Estimator.OLS, Estimator.RRR, Estimator.LTR)
HIGH_DIMENSIONAL = (Estimator.SN, Estimator.MN, Estimator.SSN, Estimator.TSSN)


def _experiment(
    name: str,
    dims: tuple[int, ...],
    ranks: tuple[int, ...],
    sample_sizes: tuple[int, ...],
    estimators: tuple[Estimator, ...],
) -> ExperimentSpec:
    return ExperimentSpec(
        name=name, dims=dims, ranks=ranks, sample_sizes=sample_sizes, estimators=estimators
    )


EXPERIMENT_CASES: dict[str, ExperimentSpec] = {
    "1a": _experiment("1a", (5, 5), (2, 2, 2, 2), (1000, 1500, 2000), LOW_DIMENSIONAL),
    "1b": _experiment("1b", (10, 10), (2, 2, 2, 2), (1000, 1500, 2000), LOW_DIMENSIONAL),
    "2a": _experiment("2a", (5, 5, 5), (2, 2, 2, 1, 1, 1), (1000, 1500, 2000), LOW_DIMENSIONAL),
    "2b": _experiment("2b", (7, 7, 7), (2, 2, 2, 1, 1, 1), (1000, 1500, 2000), LOW_DIMENSIONAL),
    "3a": _experiment("3a", (5, 5), (2, 2, 2, 2), (400, 600, 800, 1000), HIGH_DIMENSIONAL),
    "3b": _experiment("3b", (10, 10), (2, 2, 2, 2), (400, 600, 800, 1000), HIGH_DIMENSIONAL),
    "4a": _experiment("4a", (5, 5, 5), (2, 2, 2, 1, 1, 1), (600, 800, 1000, 1200), HIGH_DIMENSIONAL),
    "4b": _experiment("4b", (7, 7, 7), (2, 2, 2, 1, 1, 1), (600, 800, 1000, 1200), HIGH_DIMENSIONAL),
}

# Alternative true ranks studied for each experiment case.
RANK_OPTIONS: dict[str, tuple[tuple[int, ...], ...]] = {
    "1a": ((1, 1, 1, 1), (2, 2, 2, 2), (2, 3, 2, 3)),
    "1b": ((1, 1, 1, 1), (2, 2, 2, 2), (2, 3, 2, 3)),
    "2a": ((1, 1, 1, 1, 1, 1), (2, 2, 2, 1, 1, 1), (2, 2, 2, 2, 2, 2)),
    "2b": ((1, 1, 1, 1, 1, 1), (2, 2, 2, 1, 1, 1), (2, 2, 2, 2, 2, 2)),
    "3a": ((1, 1, 1, 1), (2, 2, 1, 1), (2, 2, 2, 2)),
    "3b": ((1, 1, 1, 1), (2, 2, 1, 1), (2, 2, 2, 2)),
    "4a": ((1, 1, 1, 1, 1, 1), (2, 2, 2, 1, 1, 1), (2, 2, 2, 2, 2, 2)),
    "4b": ((1, 1, 1, 1, 1, 1), (2, 2, 2, 1, 1, 1), (2, 2, 2, 2, 2, 2)),
}


def ssn_rank_level(ranks: Sequence[int]) -> float:
    """Average over square matricizations of their generic rank bound."""
    d = len(ranks) // 2
    bounds = []
    for modes in square_mode_sets(d).sets:
        inside = math.prod(ranks[i] for i in modes)
        outside = math.prod(ranks[i] for i in range(2 * d) if i not in modes)
        bounds.append(min(inside, outside))
    return float(np.mean(bounds))


def _scaling_cases() -> dict[str, tuple[ScalingPoint, ...]]:
    twos2, twos3 = (2, 2, 2, 2), (2, 2, 2, 2, 2, 2)
    ones2, ones3 = (1, 1, 1, 1), (1, 1, 1, 1, 1, 1)
    ranks_c = ((1, 1, 1, 1), (1, 2, 1, 2), (2, 2, 2, 2), (2, 3, 2, 3), (3, 3, 3, 3))
    ranks_g = ((1, 1, 1, 1, 1, 1), (1, 1, 2, 1, 1, 2), (1, 2, 2, 1, 2, 2), twos3, (2, 2, 3, 2, 2, 3))
    dims_e = ((4, 4, 4), (4, 4, 5), (4, 5, 5), (5, 5, 5), (5, 5, 6))
    dims_h = ((2, 2, 36), (3, 3, 16), (4, 4, 9), (3, 4, 12), (4, 6, 6))
    return {
        "a": tuple(
            ScalingPoint(value=p * p, label=f"p1=p2={p}", dims=(p, p), ranks=twos2, T=500)
            for p in (5, 7, 9, 10, 11)
        ),
        "b": tuple(
            ScalingPoint(value=T, label=f"T={T}", dims=(8, 8), ranks=twos2, T=T)
            for T in (200, 400, 600, 800, 1000)
        ),
        "c": tuple(
            ScalingPoint(value=ssn_rank_level(r), label=f"r={r}", dims=(8, 8), ranks=r, T=500)
            for r in ranks_c
        ),
        "d": tuple(
            ScalingPoint(value=p1, label=f"p1={p1}", dims=(p1, 144 // p1), ranks=ones2, T=1000)
            for p1 in (3, 4, 6, 8, 12)
        ),
        "e": tuple(
            ScalingPoint(value=math.prod(p), label=f"p={p}", dims=p, ranks=twos3, T=1000)
            for p in dims_e
        ),
        "f": tuple(
            ScalingPoint(value=T, label=f"T={T}", dims=(5, 5, 5), ranks=twos3, T=T)
            for T in (600, 800, 1000, 1200, 1400)
        ),
        "g": tuple(
            ScalingPoint(value=ssn_rank_level(r), label=f"r={r}", dims=(5, 5, 5), ranks=r, T=1000)
            for r in ranks_g
        ),
        "h": tuple(
            ScalingPoint(value=i, label=f"p={p}", dims=p, ranks=ones3, T=1000)
            for i, p in enumerate(dims_h, start=1)
        ),
    }


SCALING_CASES: dict[str, tuple[ScalingPoint, ...]] = _scaling_cases()
CASES: tuple[str, ...] = tuple(EXPERIMENT_CASES) + tuple(SCALING_CASES)


def experiment_spec(
    case: str,
    replications: int = 50,
    root_seed: int = 0,
    sample_sizes: Optional[Sequence[int]] = None,
    ranks: Optional[Sequence[int]] = None,
) -> ExperimentSpec:
    """Named experiment case with optional overrides.

    Raises:
        InvalidArgument: If the case name is unknown.
    """
    if case not in EXPERIMENT_CASES:
        raise InvalidArgument(f"unknown experiment case {case!r}; valid: {', '.join(EXPERIMENT_CASES)}")
    update: dict[str, Any] = {"replications": replications, "root_seed": root_seed}
    if sample_sizes is not None:
        update["sample_sizes"] = tuple(sample_sizes)
    if ranks is not None:
        update["ranks"] = tuple(ranks)
    return ExperimentSpec.model_validate(EXPERIMENT_CASES[case].model_dump() | update)


def fit_estimator(
    design: RegressionDesign,
    estimator: Estimator,
    ranks: Optional[Sequence[int]] = None,
    reg_opts: Optional[RegOptions] = None,
    als_opts: Optional[AlsOptions] = None,
    init: Optional[np.ndarray] = None,
) -> FitReport:
    """
    Fit any estimator of the closed set.

    Args:
        design: Regression design
        estimator: Estimator identifier
        ranks: Tucker ranks, required by RRR (through its matrix rank bound)
            and LTR
        reg_opts: Options of regularized estimators; lambda is BIC-tuned
            when unset
        als_opts: Options of the LTR alternating least squares
        init: Warm start for iterative estimators

    Returns:
        FitReport of the chosen estimator
    """
    if estimator == Estimator.OLS:
        return fit_ols(design)
    if estimator in (Estimator.RRR, Estimator.LTR) and ranks is None:
        raise InvalidArgument(f"{estimator} needs Tucker ranks")
    if estimator == Estimator.RRR:
        assert ranks is not None
        return fit_rrr(design, matrix_rank_bound(ranks))
    if estimator == Estimator.LTR:
        assert ranks is not None
        return fit_ltr(design, ranks, init=init, opts=als_opts)
    return fit_by_name(design, estimator, reg_opts or RegOptions(), init)


def _run_cell(
    spec: ExperimentSpec,
    model: LrtarModel,
    replication: int,
    T: int,
    reg_opts: Optional[RegOptions],
    als_opts: Optional[AlsOptions],
) -> list[CellResult]:
    results = []
    try:
        series = simulate(model, T + 1, seed=[spec.root_seed, replication, T])
        design = build_design(series)
    except Exception as e:
        logger.error(f"{spec.name} rep={replication} T={T}: simulation failed: {e}")
        return [
            CellResult(
                case=spec.name, estimator=est, T=T, replication=replication,
                success=False, error_message=str(e),
            )
            for est in spec.estimators
        ]

    for estimator in spec.estimators:
        start = time.perf_counter()
        try:
            fit = fit_estimator(design, estimator, spec.ranks, reg_opts, als_opts)
            error = float(np.linalg.norm(fit.estimate - model.transition))
            results.append(
                CellResult(
                    case=spec.name,
                    estimator=estimator,
                    T=T,
                    replication=replication,
                    success=True,
                    fro_error=error,
                    sq_error=error**2,
                    runtime_s=time.perf_counter() - start,
                )
            )
        except Exception as e:
            logger.error(f"{spec.name} rep={replication} T={T} {estimator} failed: {e}")
            results.append(
                CellResult(
                    case=spec.name,
                    estimator=estimator,
                    T=T,
                    replication=replication,
                    success=False,
                    runtime_s=time.perf_counter() - start,
                    error_message=str(e),
                )
            )
    logger.debug(f"{spec.name} rep={replication} T={T} done")
    return results


def results_table(results: Sequence[CellResult]) -> pd.DataFrame:
    """Result rows in the published column order."""
    frame = pd.DataFrame([r.model_dump(mode="json") for r in results])
    if frame.empty:
        return pd.DataFrame(columns=RESULT_COLUMNS)
    return frame[RESULT_COLUMNS].astype({"fro_error": float, "sq_error": float})


def run_experiment(
    spec: ExperimentSpec,
    threads: int = 1,
    reg_opts: Optional[RegOptions] = None,
    als_opts: Optional[AlsOptions] = None,
) -> pd.DataFrame:
    """
    Run every (replication, sample size) cell of an experiment.

    One DGP is drawn from ``spec.root_seed``; the series of replication r at
    sample size T is drawn from the seed words (root_seed, r, T), so results
    do not depend on scheduling. Estimator failures are recorded per cell.

    Args:
        spec: Experiment definition
        threads: Worker cap for the cells
        reg_opts: Options of regularized estimators
        als_opts: Options of the LTR fits

    Returns:
        DataFrame with columns case, estimator, T, replication, fro_error,
        sq_error, runtime_s (errors are NaN for failed cells)
    """
    logger.info(
        f"Starting experiment {spec.name}: dims={spec.dims} ranks={spec.ranks} "
        f"T={spec.sample_sizes} reps={spec.replications}"
    )
    model = make_dgp(spec.dims, spec.ranks, seed=spec.root_seed, noise_scale=spec.noise_scale)
    cells = [
        partial(_run_cell, spec, model, replication, T, reg_opts, als_opts)
        for replication in range(spec.replications)
        for T in spec.sample_sizes
    ]
    results = [row for cell in run_cells(cells, threads) for row in cell]

    successful = sum(1 for r in results if r.success)
    failed = len(results) - successful
    logger.info(f"Experiment {spec.name} completed: {successful} successful, {failed} failed")
    return results_table(results)


def summarize(table: pd.DataFrame) -> pd.DataFrame:
    """Mean and standard deviation of the errors per (case, estimator, T)."""
    return (
        table.groupby(["case", "estimator", "T"], sort=True)
        .agg(
            mean_fro=("fro_error", "mean"),
            sd_fro=("fro_error", "std"),
            mean_sq=("sq_error", "mean"),
            sd_sq=("sq_error", "std"),
            n=("fro_error", "count"),
            missing=("fro_error", lambda s: int(s.isna().sum())),
        )
        .reset_index()
    )


def experiment_summary(table: pd.DataFrame, metadata: dict[str, Any]) -> dict[str, Any]:
    """JSON-ready summary: metadata plus one record per summarized cell."""
    summary = summarize(table)
    summary = summary.astype(object).where(summary.notna(), None)
    return {"metadata": metadata, "cells": summary.to_dict(orient="records")}


def error_scaling_study(
    case: str,
    replications: int = 30,
    root_seed: int = 0,
    threads: int = 1,
    reg_opts: Optional[RegOptions] = None,
    points: Optional[Sequence[ScalingPoint]] = None,
) -> pd.DataFrame:
    """
    Squared SSN error against one varying parameter.

    Args:
        case: Scaling case name (a-h); names the output rows
        replications: Replications per point
        root_seed: Root seed shared by every point
        threads: Worker cap
        reg_opts: SSN options (BIC-tuned lambda when unset)
        points: Explicit sweep replacing the named case's points

    Returns:
        DataFrame with one row per point: case, label, value, T,
        mean_sq_error, sd_sq_error, n

    Raises:
        InvalidArgument: If the case is unknown and no points are given
    """
    if points is None:
        if case not in SCALING_CASES:
            raise InvalidArgument(f"unknown scaling case {case!r}; valid: {', '.join(SCALING_CASES)}")
        points = SCALING_CASES[case]

    rows = []
    for point in points:
        spec = ExperimentSpec(
            name=f"{case}:{point.label}",
            dims=point.dims,
            ranks=point.ranks,
            sample_sizes=(point.T,),
            estimators=(Estimator.SSN,),
            replications=replications,
            root_seed=root_seed,
        )
        errors = run_experiment(spec, threads=threads, reg_opts=reg_opts)["sq_error"].dropna()
        rows.append(
            {
                "case": case,
                "label": point.label,
                "value": point.value,
                "T": point.T,
                "mean_sq_error": float(errors.mean()) if len(errors) else math.nan,
                "sd_sq_error": float(errors.std()) if len(errors) > 1 else math.nan,
                "n": int(len(errors)),
            }
        )
    return pd.DataFrame(rows)


def _forecast_errors(forecast: np.ndarray, actual: np.ndarray) -> tuple[float, float]:
    residual = np.asarray(actual - forecast).reshape(-1)
    return float(np.linalg.norm(residual)), float(np.abs(residual).max())


def in_sample_errors(estimate: np.ndarray, series: TensorSeries) -> tuple[float, float]:
    """
    Mean one-step errors of a fitted transition over t = 2..T.

    Returns:
        (mean l2 norm, mean max-abs) of the residuals

    Raises:
        DimensionError: If the estimate does not match the series dims
    """
    estimate = np.asarray(estimate, dtype=float)
    if estimate.shape != series.dims + series.dims:
        raise DimensionError(
            f"estimate dims {estimate.shape} do not match series dims {series.dims}"
        )
    design = build_design(series)
    matrix = matricize(estimate, response_modes(len(series.dims)))
    residuals = design.response - design.predictor @ matrix.T
    l2 = np.linalg.norm(residuals, axis=1)
    linf = np.abs(residuals).max(axis=1)
    return float(l2.mean()), float(linf.mean())


def rolling_forecast(
    series: TensorSeries,
    start_origin: int,
    estimator: Optional[Estimator] = None,
    ranks: Optional[Sequence[int]] = None,
    reg_opts: Optional[RegOptions] = None,
    als_opts: Optional[AlsOptions] = None,
    retune_every: int = DEFAULT_RETUNE_EVERY,
    fixed_transition: Optional[np.ndarray] = None,
) -> ForecastReport:
    """
    One-step-ahead forecasts with an expanding training window.

    Origin t (1-based) is forecast from a fit on observations 1..t-1.
    Regularized estimators without a fixed lambda are BIC-tuned at the first
    origin and every ``retune_every`` origins after it, and every refit is
    warm-started from the previous estimate. Origins whose fit fails are
    kept as missing rows and excluded from the averages.

    Args:
        series: Observed series of length T
        start_origin: First origin t0, with 3 <= t0 <= T (2 <= t0 for a
            fixed transition)
        estimator: Estimator refitted at every origin
        ranks: Tucker ranks for RRR and LTR
        reg_opts: Options of regularized estimators
        als_opts: Options of LTR fits
        retune_every: Origins between BIC re-tunes
        fixed_transition: Use this transition at every origin instead of
            refitting (zero forecasts, oracle forecasts)

    Returns:
        ForecastReport with per-origin errors

    Raises:
        InvalidArgument: If the origin range or estimator choice is invalid
    """
    if (estimator is None) == (fixed_transition is None):
        raise InvalidArgument("give exactly one of estimator or fixed_transition")
    minimum = 2 if fixed_transition is not None else 3
    if not minimum <= start_origin <= series.length:
        raise InvalidArgument(
            f"start origin {start_origin} must lie in [{minimum}, {series.length}]"
        )

    d = len(series.dims)
    observations = series.observations
    opts = reg_opts or RegOptions()
    lam = opts.lam
    previous: Optional[np.ndarray] = None
    points = []

    for index, origin in enumerate(range(start_origin, series.length + 1)):
        actual = observations[origin - 1]
        state = observations[origin - 2]
        try:
            if fixed_transition is not None:
                transition = np.asarray(fixed_transition, dtype=float)
            else:
                assert estimator is not None
                design = build_design(TensorSeries(observations=observations[: origin - 1]))
                step_opts = opts
                if estimator in REGULARIZED_ESTIMATORS and opts.lam is None:
                    if lam is None or index % retune_every == 0:
                        lam = _retune(design, estimator, opts, previous)
                    step_opts = opts.model_copy(update={"lam": lam})
                fit = fit_estimator(design, estimator, ranks, step_opts, als_opts, previous)
                transition = fit.estimate
                previous = np.array(fit.estimate)
            forecast = matricize(transition, response_modes(d)) @ state.reshape(-1, order="F")
            l2, linf = _forecast_errors(forecast, actual.reshape(-1, order="F"))
            points.append(ForecastPoint(origin=origin, l2=l2, linf=linf))
        except Exception as e:
            logger.warning(f"Forecast origin {origin} failed: {e}")
            points.append(ForecastPoint(origin=origin))

    valid = [p for p in points if p.l2 is not None]
    missing = len(points) - len(valid)
    if missing:
        logger.warning(f"{missing} of {len(points)} forecast origins missing")
    mean_l2 = float(np.mean([p.l2 for p in valid])) if valid else math.nan
    mean_linf = float(np.mean([p.linf for p in valid])) if valid else math.nan
    logger.info(
        f"Rolling forecast over {len(points)} origins: mean l2 {mean_l2:.6g}, mean linf {mean_linf:.6g}"
    )
    return ForecastReport(points=points, mean_l2=mean_l2, mean_linf=mean_linf, missing=missing)


def _retune(
    design: RegressionDesign,
    estimator: Estimator,
    opts: RegOptions,
    init: Optional[np.ndarray],
) -> float:
    penalty = {Estimator.SN: Penalty.SN, Estimator.MN: Penalty.MN}.get(estimator, Penalty.SSN)
    selection = select_lambda_bic(design, opts=opts, penalty=penalty, init=init)
    logger.debug(f"Re-tuned lambda to {selection.lam:.4g} on T={design.length}")
    return selection.lam


def forecast_table(report: ForecastReport) -> pd.DataFrame:
    """Per-origin rows (origin, l2, linf); failed origins have NaN errors."""
    return pd.DataFrame(
        [p.model_dump() for p in report.points], columns=["origin", "l2", "linf"]
    ).astype({"l2": float, "linf": float})

"""Domain models and exceptions for low-rank tensor autoregression."""

import math
from enum import StrEnum
from pathlib import Path
from typing import Any, Optional

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    FilePath,
    PrivateAttr,
    field_validator,
    model_validator,
)

# Orthonormality of Tucker factors and reconstruction of Tucker-form models.
TUCKER_TOL = 1e-10
# Symmetry of the innovation covariance.
SYMMETRY_TOL = 1e-12


def frozen_array(value: Any) -> np.ndarray:
    """Copy to a float64 array and mark it read-only."""
    array = np.array(value, dtype=float)
    array.setflags(write=False)
    return array


def _parse_int_list(value: Any) -> Any:
    """Accept "5,5" style strings wherever a tuple of ints is expected."""
    if isinstance(value, str):
        return tuple(int(item) for item in value.split(",") if item.strip())
    return value


def _parse_float_list(value: Any) -> Any:
    if isinstance(value, str):
        return [float(item) for item in value.split(",") if item.strip()]
    return value


class Estimator(StrEnum):
    """Closed set of estimator identifiers."""

    OLS = "OLS"
    RRR = "RRR"
    LTR = "LTR"
    SN = "SN"
    MN = "MN"
    SSN = "SSN"
    TSSN = "TSSN"


REGULARIZED_ESTIMATORS = (Estimator.SN, Estimator.MN, Estimator.SSN, Estimator.TSSN)


class ArrayModel(BaseModel):
    """Base for immutable records carrying numpy arrays."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)


# ---------------------------------------------------------------------------
# tensor_core
# ---------------------------------------------------------------------------


class MatricizationMap(BaseModel):
    """Index bookkeeping of a multi-mode matricization (0-based modes)."""

    model_config = ConfigDict(frozen=True)

    tensor_dims: tuple[int, ...]
    row_modes: tuple[int, ...]
    col_modes: tuple[int, ...]
    row_dim: int
    col_dim: int

    @model_validator(mode="after")
    def check_layout(self) -> "MatricizationMap":
        if any(b <= a for a, b in zip(self.row_modes, self.row_modes[1:])):
            raise ValueError("row_modes must be strictly increasing")
        if self.row_dim * self.col_dim != math.prod(self.tensor_dims):
            raise ValueError("row_dim * col_dim must equal the tensor size")
        return self

    @property
    def permutation(self) -> tuple[int, ...]:
        return self.row_modes + self.col_modes


class TuckerDecomposition(ArrayModel):
    """Core tensor plus per-mode factor matrices with orthonormal columns."""

    core: np.ndarray
    factors: tuple[np.ndarray, ...]

    @field_validator("core")
    @classmethod
    def freeze_core(cls, value: Any) -> np.ndarray:
        return frozen_array(value)

    @field_validator("factors")
    @classmethod
    def freeze_factors(cls, value: Any) -> tuple[np.ndarray, ...]:
        return tuple(frozen_array(factor) for factor in value)

    @model_validator(mode="after")
    def check_factors(self) -> "TuckerDecomposition":
        if len(self.factors) != self.core.ndim:
            raise ValueError(
                f"expected {self.core.ndim} factors, got {len(self.factors)}"
            )
        for i, factor in enumerate(self.factors):
            if factor.ndim != 2 or factor.shape[1] != self.core.shape[i]:
                raise ValueError(
                    f"factor {i} has shape {factor.shape}, "
                    f"expected (p, {self.core.shape[i]})"
                )
            gram = factor.T @ factor
            if not np.allclose(gram, np.eye(gram.shape[0]), rtol=0, atol=TUCKER_TOL):
                raise ValueError(f"factor {i} does not have orthonormal columns")
        return self

    @property
    def ranks(self) -> tuple[int, ...]:
        return tuple(int(r) for r in self.core.shape)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(int(factor.shape[0]) for factor in self.factors)


# ---------------------------------------------------------------------------
# lrtar_model
# ---------------------------------------------------------------------------


class LrtarModel(ArrayModel):
    """Transition tensor (optionally in Tucker form) and innovation covariance."""

    transition: np.ndarray
    noise_cov: np.ndarray
    tucker: Optional[TuckerDecomposition] = None

    _noise_root: np.ndarray = PrivateAttr()

    @field_validator("transition", "noise_cov")
    @classmethod
    def freeze(cls, value: Any) -> np.ndarray:
        return frozen_array(value)

    @model_validator(mode="after")
    def check_model(self) -> "LrtarModel":
        order = self.transition.ndim
        if order == 0 or order % 2:
            raise ValueError("transition tensor must have even order 2d >= 2")
        d = order // 2
        if self.transition.shape[:d] != self.transition.shape[d:]:
            raise ValueError(
                f"transition tensor is not balanced: {self.transition.shape}"
            )
        p = math.prod(self.transition.shape[:d])
        if self.noise_cov.shape != (p, p):
            raise ValueError(f"noise_cov must be {p}x{p}, got {self.noise_cov.shape}")
        if not np.allclose(self.noise_cov, self.noise_cov.T, rtol=0, atol=SYMMETRY_TOL):
            raise ValueError("noise_cov must be symmetric")
        if np.linalg.eigvalsh(self.noise_cov).min() <= 0:
            raise ValueError("noise_cov must be positive definite")
        if self.tucker is not None:
            from .tensor_core import tucker_to_tensor

            rebuilt = tucker_to_tensor(self.tucker)
            scale = max(1.0, float(np.linalg.norm(self.transition)))
            if rebuilt.shape != self.transition.shape or (
                np.linalg.norm(rebuilt - self.transition) > TUCKER_TOL * scale
            ):
                raise ValueError("Tucker form does not reconstruct the transition")
        return self

    def model_post_init(self, __context: Any) -> None:
        # Symmetric square root of the innovation covariance, used by simulate.
        values, vectors = np.linalg.eigh(self.noise_cov)
        root = (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T
        self._noise_root = frozen_array(root)

    @property
    def order(self) -> int:
        return self.transition.ndim // 2

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(int(p) for p in self.transition.shape[: self.order])

    @property
    def size(self) -> int:
        return math.prod(self.dims)

    @property
    def noise_root(self) -> np.ndarray:
        return self._noise_root


class TensorSeries(ArrayModel):
    """T equal-shape observations stacked along a leading time axis."""

    observations: np.ndarray

    @field_validator("observations")
    @classmethod
    def check_observations(cls, value: Any) -> np.ndarray:
        array = frozen_array(value)
        if array.ndim < 2:
            raise ValueError("observations must have shape (T, p_1, ..., p_d)")
        if array.shape[0] < 1:
            raise ValueError("a series needs at least one observation")
        return array

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(int(p) for p in self.observations.shape[1:])

    @property
    def length(self) -> int:
        return int(self.observations.shape[0])

    def vectors(self) -> np.ndarray:
        """Rows vec(Y_t) in canonical (first index fastest) order."""
        stacked = np.moveaxis(self.observations, 0, -1)
        return stacked.reshape(-1, self.length, order="F").T


# ---------------------------------------------------------------------------
# least_squares
# ---------------------------------------------------------------------------


class RegressionDesign(ArrayModel):
    """Stacked response rows vec(Y_t) and predictor rows vec(Y_{t-1})."""

    response: np.ndarray
    predictor: np.ndarray
    dims: tuple[int, ...]

    @field_validator("response", "predictor")
    @classmethod
    def freeze(cls, value: Any) -> np.ndarray:
        return frozen_array(value)

    @model_validator(mode="after")
    def check_shapes(self) -> "RegressionDesign":
        p = math.prod(self.dims)
        if self.response.shape != self.predictor.shape:
            raise ValueError("response and predictor must have the same shape")
        if self.response.ndim != 2 or self.response.shape[1] != p:
            raise ValueError(f"design rows must have {p} columns")
        return self

    @property
    def length(self) -> int:
        return int(self.response.shape[0])

    @property
    def size(self) -> int:
        return int(self.response.shape[1])

    @property
    def order(self) -> int:
        return len(self.dims)


class AlsOptions(BaseModel):
    """Stopping rule and ridge safeguard of the alternating least squares."""

    tol: float = Field(default=1e-6, gt=0)
    max_iter: int = Field(default=500, ge=1)
    ridge: float = Field(default=1e-10, ge=0)


class AdmmState(ArrayModel):
    """Final iterate of the consensus ADMM and its residual history."""

    primary: np.ndarray
    surrogates: tuple[np.ndarray, ...]
    multipliers: tuple[np.ndarray, ...]
    rho: float
    lam: float
    primal_trace: list[float] = Field(default_factory=list)
    dual_trace: list[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_shapes(self) -> "AdmmState":
        for array in (*self.surrogates, *self.multipliers):
            if array.shape != self.primary.shape:
                raise ValueError("ADMM variables must share the transition shape")
        return self


class FitReport(ArrayModel):
    """Estimated transition tensor with solver diagnostics."""

    estimator: Estimator
    estimate: np.ndarray
    ranks: Optional[tuple[int, ...]] = None
    tucker: Optional[TuckerDecomposition] = None
    objective_trace: list[float] = Field(default_factory=list)
    block_trace: list[float] = Field(default_factory=list)
    iterations: int = 0
    converged: bool = True
    elapsed: float = 0.0
    lam: Optional[float] = None
    gamma: Optional[float] = None
    floored_modes: tuple[int, ...] = ()
    admm: Optional[AdmmState] = None

    @field_validator("estimate")
    @classmethod
    def freeze(cls, value: Any) -> np.ndarray:
        return frozen_array(value)


# ---------------------------------------------------------------------------
# regularized
# ---------------------------------------------------------------------------


class Penalty(StrEnum):
    """Nuclear-norm penalty families."""

    SN = "sn"
    MN = "mn"
    SSN = "ssn"


class SquareModeSets(BaseModel):
    """The 2^(d-1) index sets whose matricizations are p x p (0-based)."""

    model_config = ConfigDict(frozen=True)

    d: int = Field(ge=1)
    sets: tuple[tuple[int, ...], ...]

    @model_validator(mode="after")
    def check_sets(self) -> "SquareModeSets":
        if len(self.sets) != 2 ** (self.d - 1):
            raise ValueError(f"expected {2 ** (self.d - 1)} index sets")
        if self.sets[0] != tuple(range(self.d)):
            raise ValueError("the first index set must be S_1")
        for index_set in self.sets:
            if 0 not in index_set or len(index_set) != self.d:
                raise ValueError(f"invalid square index set {index_set}")
            for i in range(1, self.d):
                if (i in index_set) == (self.d + i in index_set):
                    raise ValueError(f"index set {index_set} must hold one of {i}, {self.d + i}")
        return self


class RegOptions(BaseModel):
    """Tuning and stopping parameters of the regularized estimators."""

    lam: Optional[float] = Field(default=None, gt=0)
    lambda_grid: Optional[list[float]] = None
    grid_size: int = Field(default=20, ge=1)
    rho: float = Field(default=1.0, gt=0)
    adapt_rho: bool = True
    relax: float = Field(default=1.6, ge=1.0, lt=2.0)
    max_iter: int = Field(default=500, ge=1)
    tol_primal: float = Field(default=1e-5, gt=0)
    tol_dual: float = Field(default=1e-5, gt=0)
    gamma: Optional[float] = Field(default=None, gt=0)

    @field_validator("lambda_grid", mode="before")
    @classmethod
    def parse_grid(cls, value: Any) -> Any:
        return _parse_float_list(value)

    @field_validator("lambda_grid")
    @classmethod
    def check_grid(cls, value: Optional[list[float]]) -> Optional[list[float]]:
        if value is not None:
            if not value:
                raise ValueError("lambda grid must be nonempty")
            if min(value) <= 0:
                raise ValueError("lambda grid values must be positive")
        return value


class LambdaScore(BaseModel):
    """One row of the BIC table."""

    lam: float
    bic: float
    df: float
    rss: float
    ranks: tuple[int, ...]
    converged: bool = True


class BicSelection(BaseModel):
    """Selected tuning parameter, the BIC table and the winning fit."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    lam: float
    table: list[LambdaScore]
    fit: FitReport


class TruncationResult(ArrayModel):
    """Output of the per-mode singular value truncation."""

    estimate: np.ndarray
    ranks: tuple[int, ...]
    floored_modes: tuple[int, ...] = ()

    @field_validator("estimate")
    @classmethod
    def freeze(cls, value: Any) -> np.ndarray:
        return frozen_array(value)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


class ExperimentSpec(BaseModel):
    """One simulation experiment: a DGP, sample sizes and estimators."""

    model_config = ConfigDict(frozen=True)

    name: str
    dims: tuple[int, ...]
    ranks: tuple[int, ...]
    sample_sizes: tuple[int, ...]
    estimators: tuple[Estimator, ...]
    replications: int = Field(default=50, ge=1)
    root_seed: int = Field(default=0, ge=0)
    noise_scale: float = Field(default=1.0, gt=0)

    @model_validator(mode="after")
    def check_spec(self) -> "ExperimentSpec":
        if len(self.ranks) != 2 * len(self.dims):
            raise ValueError("ranks must have length 2d")
        if not self.sample_sizes or min(self.sample_sizes) < 2:
            raise ValueError("sample sizes must be at least 2")
        if not self.estimators:
            raise ValueError("at least one estimator is required")
        return self


class ScalingPoint(BaseModel):
    """One setting of the varying parameter in an error-scaling study."""

    model_config = ConfigDict(frozen=True)

    value: float
    label: str
    dims: tuple[int, ...]
    ranks: tuple[int, ...]
    T: int = Field(ge=2)


class CellResult(BaseModel):
    """Outcome of one estimator on one simulated data set."""

    case: str
    estimator: Estimator
    T: int
    replication: int
    success: bool
    fro_error: Optional[float] = None
    sq_error: Optional[float] = None
    runtime_s: float = 0.0
    error_message: Optional[str] = None


class ForecastPoint(BaseModel):
    """Errors at one forecast origin; None when the fit failed."""

    origin: int
    l2: Optional[float] = None
    linf: Optional[float] = None


class ForecastReport(BaseModel):
    """Per-origin one-step-ahead errors and their averages."""

    points: list[ForecastPoint]
    mean_l2: float
    mean_linf: float
    missing: int = 0
    horizon: int = 1

    @model_validator(mode="after")
    def check_averages(self) -> "ForecastReport":
        valid = [p for p in self.points if p.l2 is not None and p.linf is not None]
        if valid:
            l2 = sum(p.l2 for p in valid if p.l2 is not None) / len(valid)
            linf = sum(p.linf for p in valid if p.linf is not None) / len(valid)
            if not (math.isclose(l2, self.mean_l2, rel_tol=1e-12, abs_tol=1e-15)
                    and math.isclose(linf, self.mean_linf, rel_tol=1e-12, abs_tol=1e-15)):
                raise ValueError("averages must equal the means of per-origin errors")
        if self.missing != len(self.points) - len(valid):
            raise ValueError("missing count does not match the per-origin rows")
        return self


# ---------------------------------------------------------------------------
# files and configuration
# ---------------------------------------------------------------------------


class SeriesHeader(BaseModel):
    """Header line of a tensor series file."""

    model_config = ConfigDict(frozen=True)

    dims: tuple[int, ...]
    T: int = Field(ge=1)
    binary: bool = False

    @field_validator("dims")
    @classmethod
    def check_dims(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        if not value or min(value) < 1:
            raise ValueError("header dims must be positive")
        return value

    @property
    def d(self) -> int:
        return len(self.dims)

    @property
    def record_size(self) -> int:
        return math.prod(self.dims)


class Settings(BaseModel):
    """Process-wide settings read from the environment."""

    threads: int = Field(default=1, ge=1)
    log_level: str = "INFO"


class RunConfig(BaseModel):
    """Base of the per-command configurations; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid")

    @field_validator("dims", "ranks", "T_grid", mode="before", check_fields=False)
    @classmethod
    def parse_ints(cls, value: Any) -> Any:
        return _parse_int_list(value)

    @field_validator("lambda_grid", mode="before", check_fields=False)
    @classmethod
    def parse_floats(cls, value: Any) -> Any:
        return _parse_float_list(value)

    @field_validator("estimator", mode="before", check_fields=False)
    @classmethod
    def parse_estimator(cls, value: Any) -> Any:
        return value.upper() if isinstance(value, str) else value


def _check_ranks(dims: tuple[int, ...], ranks: tuple[int, ...]) -> None:
    if len(ranks) != 2 * len(dims):
        raise ValueError(f"expected {2 * len(dims)} ranks for dims {dims}")
    for i, r in enumerate(ranks):
        if not 1 <= r <= dims[i % len(dims)]:
            raise ValueError(f"rank {r} at position {i} exceeds its dimension")


class SimulateConfig(RunConfig):
    dims: tuple[int, ...]
    ranks: tuple[int, ...]
    T: int = Field(ge=1)
    burn_in: int = Field(default=200, ge=0)
    seed: int = Field(default=0, ge=0)
    out: Path
    model_out: Optional[Path] = None
    binary: bool = False

    @model_validator(mode="after")
    def check_ranks(self) -> "SimulateConfig":
        if not self.dims or min(self.dims) < 1:
            raise ValueError("dims must be positive")
        _check_ranks(self.dims, self.ranks)
        return self


class FitConfig(RunConfig):
    series: FilePath
    estimator: Estimator
    ranks: Optional[tuple[int, ...]] = None
    lam: Optional[float] = Field(default=None, gt=0)
    lambda_grid: Optional[list[float]] = None
    rho: float = Field(default=1.0, gt=0)
    adapt_rho: bool = True
    relax: float = Field(default=1.6, ge=1.0, lt=2.0)
    max_iter: int = Field(default=500, ge=1)
    tol: float = Field(default=1e-5, gt=0)
    gamma: Optional[str] = None
    out: Path
    report: Optional[Path] = None
    binary: bool = False

    @field_validator("gamma")
    @classmethod
    def check_gamma(cls, value: Optional[str]) -> Optional[str]:
        if value is not None and value != "auto" and float(value) <= 0:
            raise ValueError("gamma must be 'auto' or a positive number")
        return value

    @model_validator(mode="after")
    def check_ranks(self) -> "FitConfig":
        if self.estimator in (Estimator.RRR, Estimator.LTR) and self.ranks is None:
            raise ValueError(f"{self.estimator} requires --ranks")
        return self


class ForecastConfig(RunConfig):
    series: FilePath
    estimator: Optional[Estimator] = None
    model: Optional[FilePath] = None
    ranks: Optional[tuple[int, ...]] = None
    lam: Optional[float] = Field(default=None, gt=0)
    start: int = Field(ge=2)
    retune_every: int = Field(default=12, ge=1)
    out: Path
    summary: Optional[Path] = None

    @model_validator(mode="after")
    def check_source(self) -> "ForecastConfig":
        if (self.estimator is None) == (self.model is None):
            raise ValueError("give exactly one of --estimator or --model")
        if self.estimator in (Estimator.RRR, Estimator.LTR) and self.ranks is None:
            raise ValueError(f"{self.estimator} requires --ranks")
        return self


class BenchConfig(RunConfig):
    case: str
    reps: int = Field(default=50, ge=1)
    T_grid: Optional[tuple[int, ...]] = None
    ranks: Optional[tuple[int, ...]] = None
    seed: int = Field(default=0, ge=0)
    out_dir: Path = Path("results")


class IngestConfig(RunConfig):
    csv: FilePath
    dims: tuple[int, ...]
    out: Path
    demean: bool = False
    header: bool = False
    binary: bool = False


class ExportConfig(RunConfig):
    series: FilePath
    out: Path


# ---------------------------------------------------------------------------
# exceptions
# ---------------------------------------------------------------------------


class TensorARError(Exception):
    """Base exception for the package."""

    pass


class InvalidArgument(TensorARError, ValueError):
    """Argument outside an operation's domain."""

    pass


class DimensionError(InvalidArgument):
    """Shape, mode or rank mismatch."""

    pass


class RankDeficiencyError(TensorARError):
    """Singular Gram matrix in a least squares fit."""

    pass


class NonStationaryError(TensorARError):
    """Spectral radius of the transition matrix is not below one."""

    pass


class MaxAttemptsExceeded(TensorARError):
    """A capped resampling loop gave up."""

    pass


class NumericalError(TensorARError):
    """Plug-in quantities are numerically unusable."""

    pass


class SeriesFormatError(TensorARError):
    """Malformed tensor series file."""

    pass


class MissingConfiguration(Exception):
    """Missing configuration error."""

    pass


class InvalidConfiguration(Exception):
    """Invalid configuration error."""

    pass

"""The low-rank tensor autoregressive model and its data-generating process."""

import logging
import math
from typing import Optional, Sequence

import numpy as np

from .models import (
    DimensionError,
    InvalidArgument,
    LrtarModel,
    NonStationaryError,
    NumericalError,
    TensorSeries,
    TuckerDecomposition,
)
from .retry import retry_with_reseed
from .tensor_core import (
    dematricize,
    generalized_inner,
    hosvd,
    kron_reverse,
    leading_left_singular_vectors,
    matricize,
    multi_mode_product,
    tucker_to_tensor,
    unvec_rows,
)

logger = logging.getLogger(__name__)

DEFAULT_BURN_IN = 200
DGP_CORE_NORM = 5.0
DGP_MAX_ATTEMPTS = 1000
# Spawn keys keeping model draws and innovations on separate streams of one seed.
DGP_STREAM = 0
NOISE_STREAM = 1


def response_modes(d: int) -> tuple[int, ...]:
    """Modes d..2d-1 of a transition tensor."""
    return tuple(range(d, 2 * d))


def predictor_modes(d: int) -> tuple[int, ...]:
    """Modes 0..d-1 of a transition tensor."""
    return tuple(range(d))


def transition_matrix(model: LrtarModel) -> np.ndarray:
    """The p x p matrix of the VAR representation, ``A_[S_2]``."""
    return matricize(model.transition, response_modes(model.order))


def spectral_radius(model: LrtarModel) -> float:
    """Largest eigenvalue modulus of the transition matrix."""
    eigenvalues = np.linalg.eigvals(transition_matrix(model))
    return float(np.abs(eigenvalues).max())


def _check_state(model: LrtarModel, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.shape != model.dims:
        raise DimensionError(f"state of dims {y.shape} does not match model dims {model.dims}")
    return y


def conditional_mean(model: LrtarModel, y_prev: np.ndarray) -> np.ndarray:
    """One-step conditional mean ``<A, y_prev>``.

    Raises:
        DimensionError: If y_prev does not have the model's dims.
    """
    return generalized_inner(model.transition, _check_state(model, y_prev))


def simulate(
    model: LrtarModel,
    T: int,
    burn_in: int = DEFAULT_BURN_IN,
    seed: int | Sequence[int] = 0,
) -> TensorSeries:
    """
    Draw a series from the model started at the zero tensor.

    Args:
        model: Stationary model to simulate
        T: Number of observations to keep
        burn_in: Leading observations to discard
        seed: Seed (or seed words); the innovations use its NOISE_STREAM child

    Returns:
        TensorSeries of length T

    Raises:
        NonStationaryError: If the spectral radius is not below one
        InvalidArgument: If T < 1 or burn_in < 0
    """
    if T < 1 or burn_in < 0:
        raise InvalidArgument(f"need T >= 1 and burn_in >= 0, got T={T}, burn_in={burn_in}")
    radius = spectral_radius(model)
    if radius >= 1:
        raise NonStationaryError(f"spectral radius {radius:.6f} is not below one")

    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(NOISE_STREAM,)))
    transition = transition_matrix(model)
    noise = rng.standard_normal((burn_in + T, model.size)) @ model.noise_root.T

    rows = np.empty((T, model.size))
    y = np.zeros(model.size)
    for t in range(burn_in + T):
        y = transition @ y + noise[t]
        if t >= burn_in:
            rows[t - burn_in] = y
    return TensorSeries(observations=unvec_rows(rows, model.dims))


def _check_ranks(dims: Sequence[int], ranks: Sequence[int]) -> None:
    if len(ranks) != 2 * len(dims):
        raise DimensionError(f"expected {2 * len(dims)} ranks for dims {tuple(dims)}")
    for i, r in enumerate(ranks):
        p = dims[i % len(dims)]
        if not 1 <= r <= p:
            raise DimensionError(f"rank {r} at position {i} must lie in [1, {p}]")


def make_dgp(
    dims: Sequence[int],
    ranks: Sequence[int],
    seed: int = 0,
    noise_scale: float = 1.0,
) -> LrtarModel:
    """
    Random stationary Tucker-form model used by the simulation studies.

    The core is standard Gaussian rescaled to Frobenius norm 5, each factor
    holds the leading left singular vectors of a square Gaussian matrix and
    the innovations are isotropic. Draws that are not stationary
    are replaced by fresh ones.

    Args:
        dims: Observation dimensions (p_1, ..., p_d)
        ranks: Tucker ranks (r_1, ..., r_2d)
        seed: Root seed; attempt k draws from its child (DGP_STREAM, k)
        noise_scale: Innovation standard deviation (covariance noise_scale^2 I)

    Returns:
        Stationary LrtarModel with Tucker form

    Raises:
        DimensionError: If the ranks do not fit the dimensions
        MaxAttemptsExceeded: If no stationary draw was found
    """
    dims = tuple(int(p) for p in dims)
    ranks = tuple(int(r) for r in ranks)
    _check_ranks(dims, ranks)
    full_dims = dims + dims
    p = math.prod(dims)

    def draw(attempt: int) -> LrtarModel:
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(DGP_STREAM, attempt)))
        core = rng.standard_normal(ranks)
        core *= DGP_CORE_NORM / np.linalg.norm(core)
        factors = tuple(
            leading_left_singular_vectors(rng.standard_normal((q, q)), r)
            for q, r in zip(full_dims, ranks)
        )
        tucker = TuckerDecomposition(core=core, factors=factors)
        model = LrtarModel(
            transition=tucker_to_tensor(tucker),
            noise_cov=noise_scale**2 * np.eye(p),
            tucker=tucker,
        )
        radius = spectral_radius(model)
        if radius >= 1:
            raise NonStationaryError(f"spectral radius {radius:.3f}")
        return model

    model = retry_with_reseed(draw, DGP_MAX_ATTEMPTS, f"make_dgp{dims}")
    logger.debug(f"DGP dims={dims} ranks={ranks}: spectral radius {spectral_radius(model):.3f}")
    return model


def param_count(dims: Sequence[int], ranks: Sequence[int]) -> int:
    """Free parameters of a Tucker-form transition: core plus Stiefel factors."""
    _check_ranks(dims, ranks)
    d = len(dims)
    count = math.prod(ranks)
    count += sum(ranks[i] * (dims[i] - ranks[i]) for i in range(d))
    count += sum(ranks[d + i] * (dims[i] - ranks[d + i]) for i in range(d))
    return count


def mtar_model(
    matrices: Sequence[np.ndarray], noise_cov: Optional[np.ndarray] = None
) -> LrtarModel:
    """Multilinear autoregression ``Y_t = Y_{t-1} x_1 B_1 ... x_d B_d + E_t``.

    The transition has ``A_[S_2] = B_d (x) ... (x) B_1``.
    """
    matrices = [np.asarray(b, dtype=float) for b in matrices]
    for b in matrices:
        if b.ndim != 2 or b.shape[0] != b.shape[1]:
            raise DimensionError(f"MTAR coefficient must be square, got {b.shape}")
    dims = tuple(b.shape[0] for b in matrices)
    d = len(dims)
    transition = dematricize(kron_reverse(matrices), dims + dims, response_modes(d))
    p = math.prod(dims)
    tucker = TuckerDecomposition(
        core=transition, factors=tuple(np.eye(q) for q in dims + dims)
    )
    return LrtarModel(
        transition=transition,
        noise_cov=np.eye(p) if noise_cov is None else noise_cov,
        tucker=tucker,
    )


def dynamic_factor_model(
    core: np.ndarray,
    factors: Sequence[np.ndarray],
    noise_cov: Optional[np.ndarray] = None,
) -> LrtarModel:
    """Model whose predictor and response factors coincide (U_{d+i} = U_i).

    ``core`` has dims (r_1, ..., r_d, r_1, ..., r_d) and drives the factor
    process ``F_t = Y_t x_i U_i^T``.
    """
    factors = tuple(np.asarray(u, dtype=float) for u in factors)
    tucker = TuckerDecomposition(core=core, factors=factors + factors)
    p = math.prod(u.shape[0] for u in factors)
    return LrtarModel(
        transition=tucker_to_tensor(tucker),
        noise_cov=np.eye(p) if noise_cov is None else noise_cov,
        tucker=tucker,
    )


def _require_tucker(model: LrtarModel) -> TuckerDecomposition:
    if model.tucker is None:
        raise InvalidArgument("model has no Tucker form")
    return model.tucker


def predictor_factors(model: LrtarModel, y: np.ndarray) -> np.ndarray:
    """Project a state onto the predictor factor space, ``y x_i U_i^T``."""
    tucker = _require_tucker(model)
    return multi_mode_product(
        _check_state(model, y), tucker.factors[: model.order], transpose=True
    )


def response_factors(model: LrtarModel, y: np.ndarray) -> np.ndarray:
    """Project a state onto the response factor space, ``y x_i U_{d+i}^T``."""
    tucker = _require_tucker(model)
    return multi_mode_product(
        _check_state(model, y), tucker.factors[model.order :], transpose=True
    )


def from_estimate(
    estimate: np.ndarray, ranks: Sequence[int], series: TensorSeries
) -> LrtarModel:
    """
    Wrap a fitted transition as a Tucker-form model.

    The transition is replaced by its HOSVD truncation at the given ranks and
    the innovation covariance is the residual covariance on the series.

    Raises:
        NumericalError: If the residual covariance is not positive definite
    """
    estimate = np.asarray(estimate, dtype=float)
    d = estimate.ndim // 2
    if estimate.shape != series.dims + series.dims:
        raise DimensionError(
            f"estimate dims {estimate.shape} do not match series dims {series.dims}"
        )
    tucker = hosvd(estimate, ranks)
    transition = tucker_to_tensor(tucker)
    rows = series.vectors()
    residuals = rows[1:] - rows[:-1] @ matricize(transition, response_modes(d)).T
    noise_cov = residuals.T @ residuals / residuals.shape[0]
    noise_cov = (noise_cov + noise_cov.T) / 2
    eigenvalues = np.linalg.eigvalsh(noise_cov)
    if eigenvalues.min() <= 0:
        raise NumericalError(
            f"residual covariance is not positive definite "
            f"(smallest eigenvalue {eigenvalues.min():.3e}, T={residuals.shape[0]})"
        )
    return LrtarModel(transition=transition, noise_cov=noise_cov, tucker=tucker)

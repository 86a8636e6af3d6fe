"""Low-dimensional estimators: OLS, reduced-rank regression and ALS Tucker fits."""

import logging
import math
import time
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .lrtar_model import response_modes, transition_matrix
from .models import (
    AlsOptions,
    DimensionError,
    Estimator,
    FitReport,
    InvalidArgument,
    LrtarModel,
    NumericalError,
    Penalty,
    RankDeficiencyError,
    RegOptions,
    RegressionDesign,
    TensorSeries,
)
from .tensor_core import (
    dematricize,
    hosvd,
    kron_reverse,
    matricization_permutation,
    matricize,
    mode_product,
    multi_mode_product,
    tucker_to_tensor,
    unfold,
    unvec_rows,
)

logger = logging.getLogger(__name__)

# Relative cutoff of the pseudo-inverse in the asymptotic covariance.
PINV_RCOND = 1e-10


def build_design(series: TensorSeries) -> RegressionDesign:
    """Regress each observation on its predecessor.

    Raises:
        InvalidArgument: If the series has fewer than two observations.
    """
    if series.length < 2:
        raise InvalidArgument("a regression design needs at least two observations")
    rows = series.vectors()
    return RegressionDesign(response=rows[1:], predictor=rows[:-1], dims=series.dims)


def to_transition(matrix: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Fold a p x p transition matrix into the 2d-order transition tensor."""
    dims = tuple(dims)
    return dematricize(matrix, dims + dims, response_modes(len(dims)))


def residuals(estimate: np.ndarray, design: RegressionDesign) -> np.ndarray:
    """Rows vec(Y_t) - A_[S_2] vec(Y_{t-1})."""
    matrix = matricize(estimate, response_modes(design.order))
    return design.response - design.predictor @ matrix.T


def loss(estimate: np.ndarray, design: RegressionDesign) -> float:
    """Mean squared one-step residual norm ``T^-1 sum ||Y_t - <A, Y_{t-1}>||_F^2``."""
    r = residuals(estimate, design)
    return float(np.sum(r * r) / design.length)


def _ols_matrix(design: RegressionDesign) -> np.ndarray:
    x = design.predictor
    rank = int(np.linalg.matrix_rank(x))
    if rank < design.size:
        raise RankDeficiencyError(
            f"Gram matrix X'X has rank {rank}, need {design.size} "
            f"(T={design.length}, p={design.size})"
        )
    gram = x.T @ x
    # Solves (X'X) B' = X'Y for the transition matrix B.
    return linalg.solve(gram, x.T @ design.response, assume_a="pos").T


def fit_ols(design: RegressionDesign) -> FitReport:
    """
    Unrestricted least squares.

    Args:
        design: Regression design

    Returns:
        FitReport whose estimate has ``A_[S_2] = Y'X (X'X)^-1``

    Raises:
        RankDeficiencyError: If X'X is singular
    """
    start = time.perf_counter()
    estimate = to_transition(_ols_matrix(design), design.dims)
    report = FitReport(
        estimator=Estimator.OLS,
        estimate=estimate,
        objective_trace=[loss(estimate, design)],
        iterations=1,
        elapsed=time.perf_counter() - start,
    )
    logger.debug(f"OLS fit on T={design.length}, p={design.size}: loss {report.objective_trace[0]:.6g}")
    return report


def fit_rrr(design: RegressionDesign, rank: int) -> FitReport:
    """
    Reduced-rank regression of the transition matrix.

    The OLS coefficient is projected onto the leading ``rank`` principal
    directions of the fitted values.

    Args:
        design: Regression design
        rank: Maximal rank of the transition matrix

    Returns:
        FitReport with ``ranks=(rank,)``

    Raises:
        DimensionError: If rank is outside [1, p]
        RankDeficiencyError: If X'X is singular
    """
    if not 1 <= rank <= design.size:
        raise DimensionError(f"RRR rank {rank} must lie in [1, {design.size}]")
    start = time.perf_counter()
    ols = _ols_matrix(design)
    fitted = design.predictor @ ols.T
    _, _, vt = np.linalg.svd(fitted, full_matrices=False)
    directions = vt[:rank].T
    matrix = directions @ (directions.T @ ols)
    estimate = to_transition(matrix, design.dims)
    return FitReport(
        estimator=Estimator.RRR,
        estimate=estimate,
        ranks=(rank,),
        objective_trace=[loss(estimate, design)],
        iterations=1,
        elapsed=time.perf_counter() - start,
    )


def _check_ranks(dims: Sequence[int], ranks: Sequence[int]) -> tuple[int, ...]:
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != 2 * len(dims):
        raise DimensionError(f"expected {2 * len(dims)} ranks for dims {tuple(dims)}")
    for i, r in enumerate(ranks):
        p = dims[i % len(dims)]
        if not 1 <= r <= p:
            raise DimensionError(f"rank {r} at position {i} must lie in [1, {p}]")
    return ranks


def matrix_rank_bound(ranks: Sequence[int]) -> int:
    """Largest possible rank of ``A_[S_2]`` for the given Tucker ranks."""
    d = len(ranks) // 2
    return min(math.prod(ranks[:d]), math.prod(ranks[d:]))


class _AlsState:
    """Stacked data and current Tucker blocks of an ALS run."""

    def __init__(self, design: RegressionDesign, core: np.ndarray, factors: list[np.ndarray]):
        self.d = design.order
        self.T = design.length
        self.y = unvec_rows(design.response, design.dims)
        self.x = unvec_rows(design.predictor, design.dims)
        self.core = np.array(core)
        self.factors = [np.array(u) for u in factors]

    def predictor_scores(self, skip: Optional[int] = None) -> np.ndarray:
        """Stacked ``Y_{t-1} x_i U_i^T`` over predictor modes other than skip."""
        f = self.x
        for i in range(self.d):
            if i != skip:
                f = mode_product(f, self.factors[i].T, i + 1)
        return f

    def latent(self) -> np.ndarray:
        """Stacked ``M_t = <G, F_t>`` of dims (T, r_{d+1}, ..., r_2d)."""
        f = self.predictor_scores()
        axes = list(range(1, self.d + 1))
        return np.tensordot(f, self.core, axes=(axes, list(range(self.d))))

    def lift(self, m: np.ndarray, skip: Optional[int] = None) -> np.ndarray:
        for k in range(self.d):
            if k != skip:
                m = mode_product(m, self.factors[self.d + k], k + 1)
        return m

    def objective(self) -> float:
        r = self.y - self.lift(self.latent())
        return float(np.sum(r * r) / self.T)

    def estimate(self) -> np.ndarray:
        return multi_mode_product(self.core, self.factors)


def _ridge_solve(gram: np.ndarray, rhs: np.ndarray, ridge: float) -> np.ndarray:
    gram = gram + ridge * np.eye(gram.shape[0])
    return linalg.solve(gram, rhs, assume_a="sym")


def _update_response_factor(state: _AlsState, k: int, ridge: float) -> None:
    b = state.lift(state.latent(), skip=k)
    p_k = state.y.shape[k + 1]
    yk = np.moveaxis(state.y, k + 1, 0).reshape(p_k, -1)
    bk = np.moveaxis(b, k + 1, 0).reshape(b.shape[k + 1], -1)
    state.factors[state.d + k] = _ridge_solve(bk @ bk.T, bk @ yk.T, ridge).T


def _update_predictor_factor(state: _AlsState, k: int, ridge: float) -> None:
    d = state.d
    # Core lifted on the response side, predictor mode k moved first.
    lifted = state.core
    for j in range(d):
        lifted = mode_product(lifted, state.factors[d + j], d + j)
    lifted = np.moveaxis(lifted, k, 0)
    r_k = lifted.shape[0]
    lifted = lifted.reshape(r_k, -1, math.prod(lifted.shape[d:]))

    partial = np.moveaxis(state.predictor_scores(skip=k), k + 1, 1)
    p_k = partial.shape[1]
    partial = partial.reshape(state.T, p_k, -1)

    design = np.einsum("amj,tcm->tjca", lifted, partial, optimize=True)
    design = design.reshape(-1, p_k * r_k)
    target = state.y.reshape(-1)
    solution = _ridge_solve(design.T @ design, design.T @ target, ridge)
    state.factors[k] = solution.reshape(p_k, r_k)


def _update_core(state: _AlsState, ridge: float) -> None:
    d = state.d
    f = state.predictor_scores().reshape(state.T, -1)
    v = state.factors[d]
    for u in state.factors[d + 1 :]:
        v = np.kron(v, u)
    target = state.y.reshape(state.T, -1)
    gram = np.kron(f.T @ f, v.T @ v)
    rhs = (f.T @ target @ v).reshape(-1)
    state.core = _ridge_solve(gram, rhs, ridge).reshape(state.core.shape)


def _converged(prev: float, current: float, tol: float, scale: float) -> bool:
    return abs(prev - current) <= tol * max(prev, scale)


def fit_ltr(
    design: RegressionDesign,
    ranks: Sequence[int],
    init: Optional[np.ndarray] = None,
    opts: Optional[AlsOptions] = None,
) -> FitReport:
    """
    Least squares under fixed Tucker ranks, by alternating least squares.

    Each sweep updates the predictor factors, the response factors and then
    the core, each by an exact (ridge-safeguarded) least-squares solve. No
    orthogonality is imposed during the sweeps; the final estimate is
    normalized by a truncated HOSVD.

    Args:
        design: Regression design
        ranks: Tucker ranks (r_1, ..., r_2d)
        init: Starting transition tensor; defaults to the HOSVD of the RRR
            fit, or of an MN fit when T < p
        opts: Stopping rule and ridge

    Returns:
        FitReport with per-sweep objective_trace, per-block block_trace and
        the HOSVD Tucker form. Non-convergence sets converged=False.

    Raises:
        DimensionError: If ranks do not fit the dimensions
    """
    opts = opts or AlsOptions()
    dims = design.dims
    ranks = _check_ranks(dims, ranks)
    start = time.perf_counter()

    if init is None:
        init = _default_init(design, ranks)
    elif np.shape(init) != dims + dims:
        raise DimensionError(f"init dims {np.shape(init)} do not match {dims + dims}")
    start_tucker = hosvd(init, ranks)
    state = _AlsState(design, start_tucker.core, list(start_tucker.factors))

    logger.info(f"LTR fit: dims={dims} ranks={ranks} T={design.length}")
    scale = 1e-12 * float(np.sum(design.response**2)) / design.length
    objective = state.objective()
    objective_trace = [objective]
    block_trace = [objective]
    converged = False
    iterations = 0

    for iterations in range(1, opts.max_iter + 1):
        for k in range(state.d):
            _update_predictor_factor(state, k, opts.ridge)
            block_trace.append(state.objective())
        for k in range(state.d):
            _update_response_factor(state, k, opts.ridge)
            block_trace.append(state.objective())
        _update_core(state, opts.ridge)
        block_trace.append(state.objective())

        previous, objective = objective, block_trace[-1]
        objective_trace.append(objective)
        logger.debug(f"ALS sweep {iterations}: objective {objective:.10g}")
        if _converged(previous, objective, opts.tol, scale):
            converged = True
            break

    if not converged:
        logger.warning(f"ALS did not converge in {opts.max_iter} sweeps")

    tucker = hosvd(state.estimate(), ranks)
    estimate = tucker_to_tensor(tucker)
    logger.info(
        f"LTR fit finished after {iterations} sweeps "
        f"(converged={converged}, objective={objective:.6g})"
    )
    return FitReport(
        estimator=Estimator.LTR,
        estimate=estimate,
        ranks=ranks,
        tucker=tucker,
        objective_trace=objective_trace,
        block_trace=block_trace,
        iterations=iterations,
        converged=converged,
        elapsed=time.perf_counter() - start,
    )


def _default_init(design: RegressionDesign, ranks: tuple[int, ...]) -> np.ndarray:
    if design.length >= design.size:
        try:
            return fit_rrr(design, matrix_rank_bound(ranks)).estimate
        except RankDeficiencyError as e:
            logger.debug(f"RRR start unavailable ({e}), using an MN fit")
    # regularized imports this module at load time
    from .regularized import fit_mn, lambda_max

    lam = 0.1 * lambda_max(design, Penalty.MN)
    return fit_mn(design, RegOptions(lam=lam)).estimate


def asymptotic_covariance(model: LrtarModel, design: RegressionDesign) -> np.ndarray:
    """
    Plug-in asymptotic covariance of ``sqrt(T) vec(A_[S_2])`` for a Tucker fit.

    Builds the Jacobian ``H`` of vec(A_[S_2]) with respect to the core and
    every factor, the information matrix ``J = Sigma_y (x) Sigma_e^-1`` for the
    column-major vec, and returns ``H (H'JH)^+ H'``.

    Args:
        model: Fitted model in Tucker form
        design: Design the model was fitted on

    Returns:
        Symmetric PSD matrix of size p^2 x p^2

    Raises:
        InvalidArgument: If the model has no Tucker form
        NumericalError: If a plug-in covariance is not positive definite
    """
    if model.tucker is None:
        raise InvalidArgument("asymptotic covariance needs a Tucker-form model")
    if model.dims != design.dims:
        raise DimensionError(f"model dims {model.dims} do not match design dims {design.dims}")

    T = design.length
    x = design.predictor
    resid = design.response - x @ transition_matrix(model).T
    sigma_y = x.T @ x / T
    sigma_e = resid.T @ resid / T
    for name, matrix in (("Sigma_y", sigma_y), ("Sigma_e", sigma_e)):
        smallest = float(np.linalg.eigvalsh((matrix + matrix.T) / 2).min())
        if smallest <= 0:
            raise NumericalError(
                f"plug-in {name} is not positive definite "
                f"(smallest eigenvalue {smallest:.3e}, T={T}, p={design.size})"
            )

    information = np.kron(sigma_y, np.linalg.inv(sigma_e))
    jacobian = tucker_jacobian(model)
    middle = np.linalg.pinv(jacobian.T @ information @ jacobian, rcond=PINV_RCOND, hermitian=True)
    covariance = jacobian @ middle @ jacobian.T
    return (covariance + covariance.T) / 2


def tucker_jacobian(model: LrtarModel) -> np.ndarray:
    """Jacobian of vec(A_[S_2]) in (vec G, vec U_1, ..., vec U_2d)."""
    if model.tucker is None:
        raise InvalidArgument("the Jacobian needs a Tucker-form model")
    tucker = model.tucker
    full_dims = model.dims + model.dims
    target = response_modes(model.order)

    blocks = [kron_reverse(tucker.factors)[matricization_permutation(full_dims, (), target)]]
    for k, factor in enumerate(tucker.factors):
        others = [u for i, u in enumerate(tucker.factors) if i != k]
        partial = multi_mode_product(
            tucker.core, others, modes=[i for i in range(len(full_dims)) if i != k]
        )
        w = unfold(partial, k)
        block = np.kron(w.T, np.eye(factor.shape[0]))
        blocks.append(block[matricization_permutation(full_dims, (k,), target)])
    return np.hstack(blocks)

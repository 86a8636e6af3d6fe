"""Nuclear-norm regularized estimators solved by consensus ADMM.

Three penalty families share one solver: the sum of nuclear norms of all
one-mode unfoldings (SN), the nuclear norm of the S_1 matricization (MN) and
the sum over the square matricizations (SSN). TSSN truncates an SSN fit.
"""

import itertools
import logging
import math
import time
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .least_squares import to_transition
from .lrtar_model import predictor_modes, response_modes
from .models import (
    AdmmState,
    BicSelection,
    DimensionError,
    Estimator,
    FitReport,
    InvalidArgument,
    LambdaScore,
    Penalty,
    RegOptions,
    RegressionDesign,
    SquareModeSets,
    TruncationResult,
)
from .tensor_core import (
    dematricize,
    hosvd,
    matricize,
    multi_mode_product,
    nuclear_norm,
    operator_norm,
    sign_normalize,
    soft_threshold_svd,
    unfold,
)

logger = logging.getLogger(__name__)

# Relative tolerance for ranks of convex fits.
CONVEX_RANK_TOL = 1e-6
LAMBDA_GRID_SPAN = (1.0, 0.01)
# Residual balancing of rho: active for the first RHO_ADAPT_ITERS iterations.
RHO_ADAPT_ITERS = 100
RHO_RESIDUAL_GAP = 10.0
RHO_FACTOR = 2.0

_PENALTY_ESTIMATOR = {
    Penalty.SN: Estimator.SN,
    Penalty.MN: Estimator.MN,
    Penalty.SSN: Estimator.SSN,
}


def _order(t: np.ndarray) -> int:
    """Half the order of a balanced tensor."""
    if t.ndim == 0 or t.ndim % 2 or t.shape[: t.ndim // 2] != t.shape[t.ndim // 2 :]:
        raise DimensionError(f"expected a balanced 2d-order tensor, got dims {t.shape}")
    return t.ndim // 2


def square_mode_sets(d: int) -> SquareModeSets:
    """Index sets with mode 0 fixed and one of i, d+i for every other i."""
    sets = []
    for choice in itertools.product((False, True), repeat=d - 1):
        modes = [0] + [d + i if flip else i for i, flip in enumerate(choice, start=1)]
        sets.append(tuple(sorted(modes)))
    return SquareModeSets(d=d, sets=tuple(sets))


def penalty_modes(penalty: Penalty, d: int) -> tuple[tuple[int, ...], ...]:
    """Row-mode sets of the matricizations a penalty family acts on."""
    if penalty == Penalty.SN:
        return tuple((i,) for i in range(2 * d))
    if penalty == Penalty.MN:
        return (predictor_modes(d),)
    return square_mode_sets(d).sets


def ssn_norm(t: np.ndarray) -> float:
    """Sum of nuclear norms of the square matricizations."""
    t = np.asarray(t, dtype=float)
    return sum(nuclear_norm(matricize(t, s)) for s in penalty_modes(Penalty.SSN, _order(t)))


def sn_norm(t: np.ndarray) -> float:
    """Sum of nuclear norms of all one-mode unfoldings."""
    t = np.asarray(t, dtype=float)
    return sum(nuclear_norm(unfold(t, i)) for i in range(2 * _order(t)))


def mn_norm(t: np.ndarray) -> float:
    t = np.asarray(t, dtype=float)
    return nuclear_norm(matricize(t, predictor_modes(_order(t))))


def penalty_value(t: np.ndarray, penalty: Penalty) -> float:
    t = np.asarray(t, dtype=float)
    return sum(nuclear_norm(matricize(t, s)) for s in penalty_modes(penalty, _order(t)))


def surrogate_update(
    a: np.ndarray, c: np.ndarray, modes: Sequence[int], threshold: float
) -> np.ndarray:
    """Singular value shrinkage of ``(a + c)_[modes]`` folded back."""
    shifted = np.asarray(a) + np.asarray(c)
    shrunk = soft_threshold_svd(matricize(shifted, modes), threshold)
    return dematricize(shrunk, shifted.shape, modes)


def _gradient_at_zero(design: RegressionDesign) -> np.ndarray:
    cross = design.response.T @ design.predictor / design.length
    return to_transition(-2.0 * cross, design.dims)


def lambda_max(design: RegressionDesign, penalty: Penalty) -> float:
    """Smallest tuning value for which the zero tensor is certified optimal.

    Zero solves the problem once every penalized matricization of the loss
    gradient at zero has operator norm at most K * lambda. The loss carries
    no 1/2 factor, so the gradient is ``-2 Syx`` and the value is twice
    ``max_k ||(Syx)_[I_k]||_op / K``.
    """
    gradient = _gradient_at_zero(design)
    modes = penalty_modes(penalty, design.order)
    return max(operator_norm(matricize(gradient, s)) for s in modes) / len(modes)


def default_lambda_grid(
    design: RegressionDesign, penalty: Penalty, size: int = 20
) -> list[float]:
    """Log-spaced grid from lambda_max down to 1% of it, largest first."""
    top = lambda_max(design, penalty)
    high, low = LAMBDA_GRID_SPAN
    return [float(v) for v in top * np.logspace(math.log10(high), math.log10(low), size)]


def _loss_from_moments(
    b: np.ndarray, syy: float, syx: np.ndarray, sxx: np.ndarray
) -> float:
    return float(syy - 2.0 * np.sum(b * syx) + np.sum((b @ sxx) * b))


def fit_regularized(
    design: RegressionDesign,
    penalty: Penalty,
    opts: RegOptions,
    init: Optional[np.ndarray] = None,
) -> FitReport:
    """
    Consensus ADMM for least squares plus a sum of nuclear norms.

    Every penalized matricization gets a surrogate W_k and a scaled
    multiplier C_k. The primary update has a closed form in the S_2
    matricization, the surrogate updates are singular value shrinkages with
    threshold lambda / (2 rho).

    The surrogate and multiplier steps see the relaxed point
    ``relax * A + (1 - relax) * W_k``. With ``adapt_rho`` set, rho is scaled
    up or down by RHO_FACTOR during the first RHO_ADAPT_ITERS iterations
    whenever one residual exceeds the other by RHO_RESIDUAL_GAP; the
    multipliers are rescaled and the Cholesky factor recomputed with it.
    ``relax=1`` and ``adapt_rho=False`` give the plain fixed-rho iteration.

    Both residuals are divided by ``max(||A||_F, 1)``: primal is
    ``max_k ||A - W_k||_F``, dual is ``rho * sqrt(sum_k ||W_k - W_k_prev||_F^2)``.
    The floor keeps the test absolute near the zero estimate.

    Args:
        design: Regression design
        penalty: Penalty family
        opts: Tuning parameters; opts.lam is required
        init: Starting point for the primary and surrogate variables,
            zero when omitted

    Returns:
        FitReport carrying the final AdmmState

    Raises:
        InvalidArgument: If opts.lam is missing
    """
    if opts.lam is None:
        raise InvalidArgument("a regularized fit needs a positive lambda")
    start = time.perf_counter()
    lam, rho, relax = opts.lam, opts.rho, opts.relax
    d = design.order
    full_dims = design.dims + design.dims
    s2 = response_modes(d)
    modes = penalty_modes(penalty, d)
    K = len(modes)

    T = design.length
    x, y = design.predictor, design.response
    sxx = x.T @ x / T
    syx = y.T @ x / T
    syy = float(np.sum(y * y) / T)
    factor = linalg.cho_factor(sxx + K * rho * np.eye(design.size))

    if init is None:
        a = np.zeros(full_dims)
    else:
        a = np.array(init, dtype=float)
        if a.shape != full_dims:
            raise DimensionError(f"init dims {a.shape} do not match {full_dims}")
    w = [a.copy() for _ in modes]
    c = [np.zeros(full_dims) for _ in modes]
    threshold = lam / (2.0 * rho)

    objective_trace: list[float] = []
    primal_trace: list[float] = []
    dual_trace: list[float] = []
    converged = False
    iterations = 0

    for iterations in range(1, opts.max_iter + 1):
        target = syx + rho * sum(matricize(wk - ck, s2) for wk, ck in zip(w, c))
        b = linalg.cho_solve(factor, target.T).T
        a = to_transition(b, design.dims)

        previous = w
        relaxed = [relax * a + (1.0 - relax) * wk for wk in w]
        w = [surrogate_update(ak, ck, s, threshold) for ak, ck, s in zip(relaxed, c, modes)]
        c = [ck + ak - wk for ck, ak, wk in zip(c, relaxed, w)]

        scale = max(float(np.linalg.norm(a)), 1.0)
        primal = max(float(np.linalg.norm(a - wk)) for wk in w) / scale
        dual = rho * math.sqrt(
            sum(float(np.sum((wk - wp) ** 2)) for wk, wp in zip(w, previous))
        ) / scale
        primal_trace.append(primal)
        dual_trace.append(dual)
        objective_trace.append(_loss_from_moments(b, syy, syx, sxx))
        if primal < opts.tol_primal and dual < opts.tol_dual:
            converged = True
            break

        if opts.adapt_rho and iterations <= RHO_ADAPT_ITERS:
            if primal > RHO_RESIDUAL_GAP * dual:
                updated = rho * RHO_FACTOR
            elif dual > RHO_RESIDUAL_GAP * primal:
                updated = rho / RHO_FACTOR
            else:
                updated = rho
            if updated != rho:
                # scaled multipliers are y / rho
                c = [ck * (rho / updated) for ck in c]
                rho = updated
                threshold = lam / (2.0 * rho)
                factor = linalg.cho_factor(sxx + K * rho * np.eye(design.size))
                logger.debug(f"ADMM iteration {iterations}: rho -> {rho:.4g}")

    estimator = _PENALTY_ESTIMATOR[penalty]
    if not converged:
        logger.warning(
            f"{estimator} ADMM did not converge in {opts.max_iter} iterations "
            f"(lambda={lam:.4g}, primal={primal_trace[-1]:.2e}, dual={dual_trace[-1]:.2e})"
        )
    logger.debug(f"{estimator} fit lambda={lam:.4g}: {iterations} iterations")

    state = AdmmState(
        primary=a,
        surrogates=tuple(w),
        multipliers=tuple(c),
        rho=rho,
        lam=lam,
        primal_trace=primal_trace,
        dual_trace=dual_trace,
    )
    return FitReport(
        estimator=estimator,
        estimate=a,
        objective_trace=objective_trace,
        iterations=iterations,
        converged=converged,
        elapsed=time.perf_counter() - start,
        lam=lam,
        admm=state,
    )


def fit_mn(
    design: RegressionDesign, opts: RegOptions, init: Optional[np.ndarray] = None
) -> FitReport:
    """Matrix nuclear norm estimator on the S_1 matricization."""
    return fit_regularized(design, Penalty.MN, opts, init)


def fit_sn(
    design: RegressionDesign, opts: RegOptions, init: Optional[np.ndarray] = None
) -> FitReport:
    """Sum of nuclear norms over the 2d one-mode unfoldings."""
    return fit_regularized(design, Penalty.SN, opts, init)


def fit_ssn(
    design: RegressionDesign, opts: RegOptions, init: Optional[np.ndarray] = None
) -> FitReport:
    """Sum of square-matricization nuclear norms, started from the MN fit."""
    if init is None:
        init = fit_mn(design, opts).estimate
    return fit_regularized(design, Penalty.SSN, opts, init)


def default_gamma(lam: float, d: int) -> float:
    """Truncation threshold ``2^(d-1) * lam / 4``."""
    if lam <= 0:
        raise InvalidArgument("lambda must be positive")
    return 2 ** (d - 1) * lam / 4


def truncate_tssn(estimate: np.ndarray, gamma: float) -> TruncationResult:
    """
    Keep, per mode, the singular directions with singular value above gamma.

    Modes with no singular value above gamma keep their leading direction
    and are reported in ``floored_modes``.

    Raises:
        InvalidArgument: If gamma is not positive
    """
    if gamma <= 0:
        raise InvalidArgument("gamma must be positive")
    estimate = np.asarray(estimate, dtype=float)
    factors = []
    ranks = []
    floored = []
    for i in range(estimate.ndim):
        u, sigma, _ = np.linalg.svd(unfold(estimate, i), full_matrices=False)
        r = int(np.sum(sigma > gamma))
        if r == 0:
            r = 1
            floored.append(i)
        factors.append(sign_normalize(u[:, :r]))
        ranks.append(r)
    core = multi_mode_product(estimate, factors, transpose=True)
    if floored:
        logger.warning(f"TSSN truncation floored modes {floored} at rank 1 (gamma={gamma:.4g})")
    return TruncationResult(
        estimate=multi_mode_product(core, factors),
        ranks=tuple(ranks),
        floored_modes=tuple(floored),
    )


def fit_tssn(
    design: RegressionDesign, opts: RegOptions, init: Optional[np.ndarray] = None
) -> FitReport:
    """SSN fit followed by singular value truncation at opts.gamma.

    The default threshold is :func:`default_gamma` of opts.lam.
    """
    start = time.perf_counter()
    ssn = fit_ssn(design, opts, init)
    assert opts.lam is not None
    gamma = opts.gamma if opts.gamma is not None else default_gamma(opts.lam, design.order)
    truncated = truncate_tssn(ssn.estimate, gamma)
    return ssn.model_copy(
        update={
            "estimator": Estimator.TSSN,
            "estimate": truncated.estimate,
            "ranks": truncated.ranks,
            "tucker": hosvd(truncated.estimate, truncated.ranks),
            "gamma": gamma,
            "floored_modes": truncated.floored_modes,
            "elapsed": time.perf_counter() - start,
        }
    )


def degrees_of_freedom(fit: FitReport, penalty: Penalty) -> tuple[float, tuple[int, ...]]:
    """Mean over penalized matricizations of ``s (m + n - s)``.

    Ranks are measured on the ADMM surrogates at relative tolerance 1e-6.
    """
    if fit.admm is None:
        raise InvalidArgument("degrees of freedom need an ADMM fit")
    d = fit.estimate.ndim // 2
    terms = []
    ranks = []
    for surrogate, modes in zip(fit.admm.surrogates, penalty_modes(penalty, d)):
        matrix = matricize(surrogate, modes)
        sigma = np.linalg.svd(matrix, compute_uv=False)
        s = int(np.sum(sigma > CONVEX_RANK_TOL * sigma[0])) if sigma[0] > 0 else 0
        m, n = matrix.shape
        terms.append(s * (m + n - s))
        ranks.append(s)
    return float(np.mean(terms)), tuple(ranks)


def bic(rss: float, df: float, T: int, p: int) -> float:
    """``T p log(RSS / (T p)) + log(T) df``."""
    rss = max(rss, np.finfo(float).tiny)
    return T * p * math.log(rss / (T * p)) + math.log(T) * df


def select_lambda_bic(
    design: RegressionDesign,
    grid: Optional[Sequence[float]] = None,
    opts: Optional[RegOptions] = None,
    penalty: Penalty = Penalty.SSN,
    init: Optional[np.ndarray] = None,
) -> BicSelection:
    """
    Pick lambda on a grid by BIC.

    The grid is swept from the largest value down, each fit warm-started
    from the previous one. Only fits that converged compete; when none did,
    every row competes and a warning is logged. Ties go to the larger lambda.

    Args:
        design: Regression design
        grid: Candidate values; defaults to :func:`default_lambda_grid`
        opts: Remaining solver options (opts.lam is ignored)
        penalty: Penalty family to tune
        init: Warm start for the first fit

    Returns:
        BicSelection with the table in sweep order and the winning fit

    Raises:
        InvalidArgument: If the grid is empty
    """
    opts = opts or RegOptions()
    if grid is None:
        grid = opts.lambda_grid or default_lambda_grid(design, penalty, opts.grid_size)
    if not grid:
        raise InvalidArgument("lambda grid must be nonempty")
    if min(grid) <= 0:
        raise InvalidArgument("lambda grid values must be positive")

    T, p = design.length, design.size
    table: list[LambdaScore] = []
    fits: list[FitReport] = []
    warm = init
    for lam in sorted(grid, reverse=True):
        step_opts = opts.model_copy(update={"lam": lam})
        if warm is None and penalty == Penalty.SSN:
            fit = fit_ssn(design, step_opts)
        else:
            fit = fit_regularized(design, penalty, step_opts, warm)
        warm = fit.estimate
        rss = _rss(fit.estimate, design)
        df, ranks = degrees_of_freedom(fit, penalty)
        score = bic(rss, df, T, p)
        table.append(
            LambdaScore(lam=lam, bic=score, df=df, rss=rss, ranks=ranks, converged=fit.converged)
        )
        fits.append(fit)

    candidates = [i for i, row in enumerate(table) if row.converged]
    if not candidates:
        logger.warning(
            f"no {penalty} fit on the lambda grid converged; BIC compares unconverged fits"
        )
        candidates = list(range(len(table)))
    best = fits[candidates[0]]
    best_score = table[candidates[0]].bic
    for i in candidates[1:]:
        if table[i].bic < best_score:
            best, best_score = fits[i], table[i].bic

    assert best.lam is not None
    logger.info(f"BIC selected lambda={best.lam:.4g} from {len(table)} candidates")
    return BicSelection(lam=best.lam, table=table, fit=best)


def _rss(estimate: np.ndarray, design: RegressionDesign) -> float:
    matrix = matricize(estimate, response_modes(design.order))
    r = design.response - design.predictor @ matrix.T
    return float(np.sum(r * r))


def fit_by_name(
    design: RegressionDesign,
    estimator: Estimator,
    opts: RegOptions,
    init: Optional[np.ndarray] = None,
) -> FitReport:
    """Dispatch a regularized estimator; BIC-tunes lambda when opts.lam is unset."""
    penalty = {
        Estimator.SN: Penalty.SN,
        Estimator.MN: Penalty.MN,
        Estimator.SSN: Penalty.SSN,
        Estimator.TSSN: Penalty.SSN,
    }.get(estimator)
    if penalty is None:
        raise InvalidArgument(f"{estimator} is not a regularized estimator")
    if opts.lam is None:
        selection = select_lambda_bic(design, opts=opts, penalty=penalty, init=init)
        opts = opts.model_copy(update={"lam": selection.lam})
        if estimator != Estimator.TSSN:
            return selection.fit
        return fit_tssn(design, opts, init=selection.fit.estimate)
    fitters = {Estimator.SN: fit_sn, Estimator.MN: fit_mn, Estimator.SSN: fit_ssn, Estimator.TSSN: fit_tssn}
    return fitters[estimator](design, opts, init)

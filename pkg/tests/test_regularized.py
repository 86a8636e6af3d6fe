"""Tests for the nuclear-norm regularized estimators and BIC tuning."""

import math

import numpy as np
import pytest
from pydantic import ValidationError

from tensorar.least_squares import build_design, fit_ols, loss, to_transition
from tensorar.lrtar_model import make_dgp, mtar_model, response_modes, simulate
from tensorar.models import (
    DimensionError,
    Estimator,
    FitReport,
    InvalidArgument,
    Penalty,
    RegOptions,
    SquareModeSets,
    TuckerDecomposition,
)
from tensorar.regularized import (
    bic,
    default_gamma,
    default_lambda_grid,
    degrees_of_freedom,
    fit_by_name,
    fit_mn,
    fit_regularized,
    fit_sn,
    fit_ssn,
    fit_tssn,
    lambda_max,
    mn_norm,
    penalty_modes,
    penalty_value,
    select_lambda_bic,
    sn_norm,
    square_mode_sets,
    ssn_norm,
    surrogate_update,
    truncate_tssn,
)
from tensorar.tensor_core import (
    leading_left_singular_vectors,
    matricize,
    nuclear_norm,
    tucker_to_tensor,
    unfold,
)


@pytest.fixture(scope="module")
def design():
    model = make_dgp((2, 2), (1, 1, 1, 1), seed=1)
    return build_design(simulate(model, 300, seed=2))


def _objective(estimate, design, lam, penalty):
    return loss(estimate, design) + lam * penalty_value(estimate, penalty)


def _low_rank(dims, ranks, seed=0):
    rng = np.random.default_rng(seed)
    factors = tuple(
        leading_left_singular_vectors(rng.standard_normal((p, p)), r) for p, r in zip(dims, ranks)
    )
    return tucker_to_tensor(TuckerDecomposition(core=rng.standard_normal(ranks), factors=factors))


def test_square_mode_sets():
    """Mode 0 is fixed and one of i, d+i is chosen for every other mode."""
    assert square_mode_sets(1).sets == ((0,),)
    assert square_mode_sets(2).sets == ((0, 1), (0, 3))
    sets = square_mode_sets(3).sets
    assert len(sets) == 4
    assert sets[0] == (0, 1, 2)
    assert set(sets) == {(0, 1, 2), (0, 2, 4), (0, 1, 5), (0, 4, 5)}


def test_square_mode_sets_give_square_matricizations():
    """Every selected matricization is p x p."""
    t = np.zeros((2, 3, 4, 2, 3, 4))
    for modes in square_mode_sets(3).sets:
        assert matricize(t, modes).shape == (24, 24)


def test_square_mode_sets_validation():
    """Index sets that are not square are rejected."""
    with pytest.raises(ValidationError):
        SquareModeSets(d=2, sets=((0, 1), (0, 2)))
    with pytest.raises(ValidationError):
        SquareModeSets(d=2, sets=((0, 1),))


def test_penalty_modes():
    """SN acts on all unfoldings, MN on S_1 only."""
    assert penalty_modes(Penalty.SN, 2) == ((0,), (1,), (2,), (3,))
    assert penalty_modes(Penalty.MN, 2) == ((0, 1),)
    assert penalty_modes(Penalty.SSN, 2) == ((0, 1), (0, 3))


def test_norms_for_order_one():
    """For d = 1 every penalty reduces to the matrix nuclear norm (SN counts it twice)."""
    m = np.random.default_rng(0).standard_normal((3, 3))
    assert ssn_norm(m) == pytest.approx(nuclear_norm(m))
    assert mn_norm(m) == pytest.approx(nuclear_norm(m))
    assert sn_norm(m) == pytest.approx(2 * nuclear_norm(m))


def test_norms_reject_unbalanced_tensors():
    """Penalties need a balanced 2d-order tensor."""
    with pytest.raises(DimensionError, match="balanced"):
        ssn_norm(np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        sn_norm(np.zeros((2, 2, 2)))


def test_ssn_norm_sums_square_matricizations():
    """SSN sums the nuclear norms of the S_1 and {0, 3} matricizations for d = 2."""
    t = np.random.default_rng(3).standard_normal((2, 3, 2, 3))
    expected = nuclear_norm(matricize(t, (0, 1))) + nuclear_norm(matricize(t, (0, 3)))
    assert ssn_norm(t) == pytest.approx(expected)
    assert penalty_value(t, Penalty.SSN) == pytest.approx(expected)
    assert penalty_value(t, Penalty.SN) == pytest.approx(sn_norm(t))


def test_surrogate_update_shrinks_matricization():
    """The surrogate is the shrunk matricization of a + c, folded back."""
    a = np.random.default_rng(4).standard_normal((2, 2, 2, 2))
    c = np.zeros_like(a)
    w = surrogate_update(a, c, (0, 3), 0.5)
    sigma_a = np.linalg.svd(matricize(a, (0, 3)), compute_uv=False)
    sigma_w = np.linalg.svd(matricize(w, (0, 3)), compute_uv=False)
    assert np.allclose(sigma_w, np.maximum(sigma_a - 0.5, 0.0))


def test_lambda_max_gives_zero_fit(design):
    """Above lambda_max the penalized fit is the zero tensor."""
    for penalty in Penalty:
        top = lambda_max(design, penalty)
        fit = fit_regularized(design, penalty, RegOptions(lam=1.05 * top, max_iter=2000))
        assert np.linalg.norm(fit.estimate) < 1e-3


def test_default_lambda_grid(design):
    """Twenty log-spaced values from lambda_max down to 1% of it."""
    grid = default_lambda_grid(design, Penalty.SSN)
    top = lambda_max(design, Penalty.SSN)
    assert len(grid) == 20
    assert grid[0] == pytest.approx(top)
    assert grid[-1] == pytest.approx(0.01 * top)
    assert all(b < a for a, b in zip(grid, grid[1:]))
    ratios = [b / a for a, b in zip(grid, grid[1:])]
    assert np.allclose(ratios, ratios[0])


def test_small_lambda_approaches_ols(design):
    """A vanishing penalty leaves the least squares solution."""
    fit = fit_mn(design, RegOptions(lam=1e-8, max_iter=5000, tol_primal=1e-8, tol_dual=1e-8))
    assert np.allclose(fit.estimate, fit_ols(design).estimate, atol=1e-4)


def test_fit_beats_reference_points(design):
    """The ADMM solution has lower penalized objective than zero and OLS."""
    lam = 0.1 * lambda_max(design, Penalty.SSN)
    opts = RegOptions(lam=lam, max_iter=3000, tol_primal=1e-7, tol_dual=1e-7)
    fit = fit_ssn(design, opts)
    assert fit.converged
    value = _objective(fit.estimate, design, lam, Penalty.SSN)
    ols = fit_ols(design).estimate
    assert value <= _objective(np.zeros_like(ols), design, lam, Penalty.SSN) + 1e-6
    assert value <= _objective(ols, design, lam, Penalty.SSN) + 1e-6


def test_admm_state_and_traces(design):
    """The report carries per-iteration traces and the final ADMM variables."""
    fit = fit_sn(design, RegOptions(lam=0.05, max_iter=300))
    assert fit.estimator == Estimator.SN
    assert fit.lam == 0.05
    assert fit.admm is not None
    assert len(fit.admm.surrogates) == 4
    assert len(fit.admm.primal_trace) == fit.iterations
    assert len(fit.objective_trace) == fit.iterations
    assert fit.objective_trace[-1] == pytest.approx(loss(fit.estimate, design))


def test_fit_regularized_checks_arguments(design):
    """Lambda is required and warm starts must match the design."""
    with pytest.raises(InvalidArgument, match="lambda"):
        fit_regularized(design, Penalty.MN, RegOptions())
    with pytest.raises(DimensionError, match="init dims"):
        fit_regularized(design, Penalty.MN, RegOptions(lam=0.1), init=np.zeros((2, 2)))


def test_reg_options_validation():
    """Lambda must be positive and grids nonempty."""
    with pytest.raises(ValidationError):
        RegOptions(lam=-1.0)
    with pytest.raises(ValidationError):
        RegOptions(lambda_grid=[])
    assert RegOptions(lambda_grid="0.5,0.1").lambda_grid == [0.5, 0.1]


def test_default_gamma():
    """2^(d-1) lambda / 4."""
    assert default_gamma(1.0, 2) == pytest.approx(0.5)
    assert default_gamma(0.4, 3) == pytest.approx(0.4)
    with pytest.raises(InvalidArgument):
        default_gamma(0.0, 2)


def test_truncate_tssn_recovers_exact_ranks():
    """Truncation keeps an exact low-rank tensor and its ranks."""
    t = _low_rank((3, 3, 3, 3), (2, 1, 1, 2))
    result = truncate_tssn(t, 1e-8)
    assert result.ranks == (2, 1, 1, 2)
    assert result.floored_modes == ()
    assert np.allclose(result.estimate, t)


def test_truncate_tssn_floors_at_rank_one():
    """Modes with nothing above gamma keep one direction and are reported."""
    t = _low_rank((2, 2, 2, 2), (1, 1, 1, 1))
    largest = max(np.linalg.svd(unfold(t, i), compute_uv=False)[0] for i in range(4))
    result = truncate_tssn(t, 2 * largest)
    assert result.ranks == (1, 1, 1, 1)
    assert result.floored_modes == (0, 1, 2, 3)
    with pytest.raises(InvalidArgument, match="gamma"):
        truncate_tssn(t, 0.0)


def test_fit_tssn_reports_truncation(design):
    """TSSN carries the threshold, the ranks and a Tucker form."""
    fit = fit_tssn(design, RegOptions(lam=0.05))
    assert fit.estimator == Estimator.TSSN
    assert fit.gamma == pytest.approx(default_gamma(0.05, 2))
    assert fit.ranks is not None and len(fit.ranks) == 4
    assert fit.tucker is not None
    assert fit.tucker.ranks == fit.ranks

    fixed = fit_tssn(design, RegOptions(lam=0.05, gamma=0.01))
    assert fixed.gamma == 0.01


def test_degrees_of_freedom(design):
    """df averages s(m + n - s) over the surrogates."""
    fit = fit_mn(design, RegOptions(lam=0.5 * lambda_max(design, Penalty.MN), max_iter=2000))
    df, ranks = degrees_of_freedom(fit, Penalty.MN)
    s = ranks[0]
    assert df == pytest.approx(s * (4 + 4 - s))
    with pytest.raises(InvalidArgument, match="ADMM"):
        degrees_of_freedom(FitReport(estimator=Estimator.OLS, estimate=fit.estimate), Penalty.MN)


def test_bic_formula():
    """T p log(RSS / (T p)) + log(T) df."""
    assert bic(200.0, 3.0, 50, 4) == pytest.approx(200 * math.log(1.0) + math.log(50) * 3)
    assert math.isfinite(bic(0.0, 1.0, 10, 2))


def test_select_lambda_bic_table(design):
    """Every grid value is scored in descending order and the minimum wins."""
    grid = [0.01, 0.2, 0.05, 0.5]
    selection = select_lambda_bic(design, grid=grid, penalty=Penalty.MN)
    assert [row.lam for row in selection.table] == [0.5, 0.2, 0.05, 0.01]
    best = min(selection.table, key=lambda row: row.bic)
    assert selection.lam == best.lam
    assert selection.fit.lam == selection.lam


def test_select_lambda_bic_rejects_bad_grids(design):
    """Grids must be nonempty and positive."""
    with pytest.raises(InvalidArgument):
        select_lambda_bic(design, grid=[])
    with pytest.raises(InvalidArgument):
        select_lambda_bic(design, grid=[0.1, -0.1])


def test_fit_by_name_tunes_lambda(design):
    """Without a fixed lambda the BIC choice is used."""
    opts = RegOptions(lambda_grid=[0.3, 0.1, 0.03])
    fit = fit_by_name(design, Estimator.SSN, opts)
    assert fit.estimator == Estimator.SSN
    assert fit.lam in (0.3, 0.1, 0.03)

    tssn = fit_by_name(design, Estimator.TSSN, opts)
    assert tssn.estimator == Estimator.TSSN
    assert tssn.gamma == pytest.approx(default_gamma(tssn.lam, 2))


def test_fit_by_name_rejects_unregularized(design):
    """Only regularized estimators are dispatched."""
    with pytest.raises(InvalidArgument, match="not a regularized"):
        fit_by_name(design, Estimator.OLS, RegOptions(lam=0.1))


@pytest.mark.slow
def test_ssn_beats_ols_on_low_rank_case():
    """On a high-dimensional low-rank case SSN has lower average error than OLS."""
    model = make_dgp((5, 5), (1, 1, 1, 1), seed=0)
    ssn_errors, ols_errors = [], []
    for rep in range(5):
        design = build_design(simulate(model, 201, seed=[0, rep, 200]))
        ssn = fit_by_name(design, Estimator.SSN, RegOptions())
        ssn_errors.append(np.linalg.norm(ssn.estimate - model.transition))
        ols_errors.append(np.linalg.norm(fit_ols(design).estimate - model.transition))
    assert np.mean(ssn_errors) < np.mean(ols_errors)


def test_surrogate_update_is_proximal():
    """Random perturbations never lower the surrogate objective."""
    rng = np.random.default_rng(7)
    a = rng.standard_normal((2, 2, 2, 2))
    c = 0.1 * rng.standard_normal((2, 2, 2, 2))
    lam, rho, modes = 0.8, 1.0, (0, 3)

    def surrogate_objective(w):
        return lam * nuclear_norm(matricize(w, modes)) + rho * np.sum((a + c - w) ** 2)

    w = surrogate_update(a, c, modes, lam / (2 * rho))
    best = surrogate_objective(w)
    for _ in range(1000):
        trial = w + 0.05 * rng.standard_normal(w.shape)
        assert surrogate_objective(trial) >= best - 1e-12


@pytest.mark.slow
def test_tssn_recovers_ranks():
    """Truncation at the default threshold finds the true ranks in most replications."""
    model = make_dgp((5, 5), (1, 1, 1, 1), seed=0)
    hits = 0
    for rep in range(50):
        design = build_design(simulate(model, 2001, seed=[0, rep, 2000]))
        fit = fit_by_name(design, Estimator.TSSN, RegOptions())
        hits += fit.ranks == (1, 1, 1, 1)
    assert hits >= 45


def _loss_gradient(estimate, design):
    b = matricize(estimate, response_modes(design.order))
    x, y = design.predictor, design.response
    grad = 2.0 * (b @ (x.T @ x) - y.T @ x) / design.length
    return to_transition(grad, design.dims)


def _check_subgradient(z, surrogate, tol):
    """z lies in the nuclear-norm subdifferential at the (low-rank) surrogate."""
    u, sigma, vt = np.linalg.svd(surrogate)
    s = int(np.sum(sigma > 1e-6 * sigma[0])) if sigma[0] > 0 else 0
    u, v = u[:, :s], vt[:s].T
    if s:
        assert np.allclose(u.T @ z @ v, np.eye(s), atol=tol)
    off_u = np.eye(z.shape[0]) - u @ u.T
    off_v = np.eye(z.shape[1]) - v @ v.T
    assert np.allclose(u.T @ z @ off_v, 0.0, atol=tol)
    assert np.allclose(off_u @ z @ v, 0.0, atol=tol)
    assert np.linalg.norm(off_u @ z @ off_v, 2) <= 1.0 + tol


def test_mn_fit_satisfies_optimality_conditions(design):
    """-grad L / lambda is a subgradient of the S_1 nuclear norm at the MN fit."""
    lam = 0.3 * lambda_max(design, Penalty.MN)
    opts = RegOptions(lam=lam, max_iter=5000, tol_primal=1e-9, tol_dual=1e-9)
    fit = fit_mn(design, opts)
    assert fit.converged and fit.admm is not None
    modes = penalty_modes(Penalty.MN, 2)[0]
    z = -matricize(_loss_gradient(fit.estimate, design), modes) / lam
    _check_subgradient(z, matricize(fit.admm.surrogates[0], modes), 1e-3)


def test_sn_fit_satisfies_optimality_conditions(design):
    """The scaled multipliers certify the SN fit mode by mode."""
    lam = 0.2 * lambda_max(design, Penalty.SN)
    opts = RegOptions(lam=lam, max_iter=5000, tol_primal=1e-9, tol_dual=1e-9)
    fit = fit_sn(design, opts)
    assert fit.converged and fit.admm is not None
    rho = fit.admm.rho
    duals = [2.0 * rho * c / lam for c in fit.admm.multipliers]
    gradient = _loss_gradient(fit.estimate, design)
    assert np.allclose(gradient / lam + sum(duals), 0.0, atol=1e-3)
    for z, w, mode in zip(duals, fit.admm.surrogates, range(4)):
        _check_subgradient(unfold(z, mode), unfold(w, mode), 1e-3)


@pytest.fixture(scope="module")
def vector_design():
    rng = np.random.default_rng(11)
    q = np.linalg.qr(rng.standard_normal((4, 4)))[0]
    b = q[:, :2] @ np.diag([0.7, 0.4]) @ q[:, :2].T
    return build_design(simulate(mtar_model([b]), 300, seed=5))


def test_ssn_matches_mn_for_vector_series(vector_design):
    """With one mode the square matricization is S_1 and SSN is MN."""
    assert penalty_modes(Penalty.SSN, 1) == penalty_modes(Penalty.MN, 1)
    opts = RegOptions(lam=0.05, max_iter=5000, tol_primal=1e-8, tol_dual=1e-8)
    ssn = fit_ssn(vector_design, opts)
    mn = fit_mn(vector_design, opts)
    assert np.allclose(ssn.estimate, mn.estimate, atol=1e-4)


def test_sn_is_mn_at_twice_lambda_for_vector_series(vector_design):
    """Both unfoldings of a matrix share its nuclear norm, so SN(lam) = MN(2 lam)."""
    sn = fit_sn(vector_design, RegOptions(lam=0.05, max_iter=5000, tol_primal=1e-8, tol_dual=1e-8))
    mn = fit_mn(vector_design, RegOptions(lam=0.1, max_iter=5000, tol_primal=1e-8, tol_dual=1e-8))
    assert sn.converged and mn.converged
    assert np.allclose(sn.estimate, mn.estimate, atol=1e-4)


def test_fixed_rho_without_relaxation_still_converges(design):
    """relax=1 with a fixed rho is the plain iteration and reaches the same point."""
    lam = 0.2 * lambda_max(design, Penalty.SSN)
    tight = dict(lam=lam, max_iter=20000, tol_primal=1e-8, tol_dual=1e-8)
    plain = fit_ssn(design, RegOptions(adapt_rho=False, relax=1.0, **tight))
    fast = fit_ssn(design, RegOptions(**tight))
    assert plain.converged and fast.converged
    assert plain.admm is not None and plain.admm.rho == 1.0
    assert np.allclose(plain.estimate, fast.estimate, atol=1e-4)


def test_reg_options_relaxation_range():
    """Relaxation lies in [1, 2)."""
    with pytest.raises(ValidationError):
        RegOptions(relax=2.0)
    with pytest.raises(ValidationError):
        RegOptions(relax=0.5)
    assert RegOptions().relax == 1.6


def test_select_lambda_bic_skips_unconverged_fits(design, monkeypatch):
    """Fits that stopped at max_iter are tabled but never selected."""
    import tensorar.regularized as regularized

    original = regularized.fit_regularized

    def stalled_at_smallest(design, penalty, opts, init=None):
        fit = original(design, penalty, opts, init)
        if opts.lam == 0.01:
            return fit.model_copy(update={"converged": False})
        return fit

    monkeypatch.setattr(regularized, "fit_regularized", stalled_at_smallest)
    selection = select_lambda_bic(design, grid=[0.5, 0.05, 0.01], penalty=Penalty.MN)
    rows = {row.lam: row for row in selection.table}
    assert rows[0.01].converged is False
    assert rows[0.5].converged and rows[0.05].converged
    assert selection.lam != 0.01
    assert selection.lam == min((rows[0.5], rows[0.05]), key=lambda row: row.bic).lam


def test_select_lambda_bic_falls_back_when_nothing_converged(design, caplog):
    """With no converged fit every row competes and a warning is logged."""
    opts = RegOptions(max_iter=1)
    selection = select_lambda_bic(design, grid=[0.3, 0.03], opts=opts, penalty=Penalty.MN)
    assert not any(row.converged for row in selection.table)
    assert selection.lam == min(selection.table, key=lambda row: row.bic).lam
    assert "no MN fit on the lambda grid converged" in caplog.text


@pytest.mark.slow
def test_ssn_converges_within_default_budget_on_case_3a():
    """Default options reach 1e-5 residuals in at most 500 iterations."""
    model = make_dgp((5, 5), (2, 2, 2, 2), seed=0)
    for rep in range(3):
        design = build_design(simulate(model, 801, seed=[0, rep, 800]))
        selection = select_lambda_bic(design, penalty=Penalty.SSN)
        fit = selection.fit
        assert fit.converged
        assert fit.iterations <= 500
        assert fit.admm is not None
        assert fit.admm.primal_trace[-1] < 1e-5
        assert fit.admm.dual_trace[-1] < 1e-5


def test_lambda_max_is_twice_the_cross_moment_norm(design):
    """The loss has no 1/2 factor, so lambda_max doubles the cross-moment norm."""
    syx = to_transition(design.response.T @ design.predictor / design.length, design.dims)
    for penalty in Penalty:
        modes = penalty_modes(penalty, 2)
        proxy = max(np.linalg.norm(matricize(syx, s), 2) for s in modes) / len(modes)
        assert lambda_max(design, penalty) == pytest.approx(2.0 * proxy)

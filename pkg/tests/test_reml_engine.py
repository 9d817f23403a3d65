"""REML engine: GLS solves, the deviance, its gradient, and the fit ladder."""

import numpy as np
import pytest

from prognostic_mmrm import (
    ConvergenceError,
    CovarianceSpec,
    DataError,
    ModelSpec,
    RankError,
    build_design,
    fit_mmrm,
    gls_solve,
    materialize,
    reml_neg2loglik,
    stack_outcomes,
)

from oracles import dense_gls, dense_reml_objective, oracle_psi
from util import dataset, random_dataset, record

_UNADJ = ModelSpec(adjust_prognostic=False)


def _blocks(data, spec):
    design = build_design(data, spec)
    outcomes = stack_outcomes(data, design)
    x_blocks = [np.asarray(m) for m in design.matrices]
    y_blocks, pos = [], 0
    for m in design.matrices:
        y_blocks.append(outcomes[pos:pos + m.shape[0]])
        pos += m.shape[0]
    obs = [list(ix) for ix in design.observed_visit_indices]
    return design, outcomes, x_blocks, y_blocks, obs


def test_gls_single_timepoint_is_difference_in_means():
    rng = np.random.default_rng(21)
    y0 = rng.normal(1.0, 1.0, 14)
    y1 = rng.normal(2.2, 1.0, 11)
    recs = [record(f"a{i}", 0, [v]) for i, v in enumerate(y0)]
    recs += [record(f"b{i}", 1, [v]) for i, v in enumerate(y1)]
    data = dataset(recs, 1)
    design = build_design(data, _UNADJ)
    outcomes = stack_outcomes(data, design)
    sigma2 = 1.7
    beta, vcov = gls_solve(design, outcomes, np.array([[sigma2]]))
    assert abs(beta[0] - y0.mean()) < 1e-12
    assert abs(beta[1] - (y1.mean() - y0.mean())) < 1e-12
    expected_var = sigma2 * (1.0 / len(y0) + 1.0 / len(y1))
    assert abs(vcov[1, 1] - expected_var) < 1e-12


def test_gls_matches_dense_whole_system_solve():
    rng = np.random.default_rng(22)
    data = random_dataset(rng, 30, 4, missing="monotone", n_covariates=1)
    spec = ModelSpec(adjust_prognostic=True, adjust_baseline=(0,))
    design, outcomes, xb, yb, obs = _blocks(data, spec)
    a = rng.normal(size=(4, 4))
    psi = a @ a.T + 4.0 * np.eye(4)
    beta, vcov = gls_solve(design, outcomes, psi)
    beta_ref, vcov_ref = dense_gls(xb, yb, psi, obs)
    np.testing.assert_allclose(beta, beta_ref, rtol=0, atol=1e-10)
    np.testing.assert_allclose(vcov, vcov_ref, rtol=1e-10, atol=1e-12)


def test_gls_betas_invariant_to_rescaling_psi():
    rng = np.random.default_rng(23)
    data = random_dataset(rng, 24, 3)
    design = build_design(data, _UNADJ)
    outcomes = stack_outcomes(data, design)
    a = rng.normal(size=(3, 3))
    psi = a @ a.T + 3.0 * np.eye(3)
    beta1, vcov1 = gls_solve(design, outcomes, psi)
    beta2, vcov2 = gls_solve(design, outcomes, 7.5 * psi)
    np.testing.assert_allclose(beta1, beta2, atol=1e-10)
    np.testing.assert_allclose(7.5 * vcov1, vcov2, rtol=1e-10)


def test_gls_reports_aliased_columns_on_singular_information():
    rng = np.random.default_rng(24)
    recs = []
    for i in range(12):
        v = float(rng.normal())
        recs.append(record(f"p{i}", i % 2, [rng.normal(), rng.normal()],
                           covariates=[v, v]))
    data = dataset(recs, 2, covariate_names=("dup1", "dup2"))
    spec = ModelSpec(adjust_prognostic=False, adjust_baseline=(0, 1))
    design = build_design(data, spec)
    outcomes = stack_outcomes(data, design)
    with pytest.raises(RankError) as exc:
        gls_solve(design, outcomes, np.eye(2))
    assert "dup" in str(exc.value)


@pytest.mark.parametrize("kind", ["unstructured", "compound_symmetry", "toeplitz"])
def test_deviance_matches_dense_computation(kind):
    rng = np.random.default_rng(31)
    data = random_dataset(rng, 20, 3, missing="monotone")
    design, outcomes, xb, yb, obs = _blocks(data, _UNADJ)
    spec = CovarianceSpec(kind, 3)
    for _ in range(4):
        phi = rng.uniform(-0.6, 0.6, spec.param_count)
        psi = materialize(spec, phi)
        got = reml_neg2loglik(design, outcomes, spec, phi)
        want = dense_reml_objective(xb, yb, psi, obs)
        assert abs(got - want) < 1e-8 * max(1.0, abs(want))


def test_analytic_gradient_matches_finite_differences():
    rng = np.random.default_rng(32)
    for t in (2, 3, 5):
        data = random_dataset(rng, 18, t, missing="monotone")
        design = build_design(data, _UNADJ)
        outcomes = stack_outcomes(data, design)
        for kind in ("unstructured", "compound_symmetry", "toeplitz"):
            spec = CovarianceSpec(kind, t)
            phi = rng.uniform(-0.5, 0.5, spec.param_count)
            _, grad = reml_neg2loglik(design, outcomes, spec, phi, gradient=True)
            h = 1e-6
            for k in range(spec.param_count):
                e = np.zeros(spec.param_count)
                e[k] = h
                fd = (reml_neg2loglik(design, outcomes, spec, phi + e)
                      - reml_neg2loglik(design, outcomes, spec, phi - e)) / (2 * h)
                scale = max(1.0, abs(fd), abs(grad[k]))
                assert abs(grad[k] - fd) < 2e-5 * scale, (t, kind, k)


def test_single_timepoint_fit_recovers_pooled_variance():
    rng = np.random.default_rng(33)
    y0 = rng.normal(0.0, 2.0, 9)
    y1 = rng.normal(1.0, 2.0, 13)
    recs = [record(f"a{i}", 0, [v]) for i, v in enumerate(y0)]
    recs += [record(f"b{i}", 1, [v]) for i, v in enumerate(y1)]
    fit = fit_mmrm(dataset(recs, 1), _UNADJ)
    n = len(y0) + len(y1)
    pooled = (np.sum((y0 - y0.mean()) ** 2) + np.sum((y1 - y1.mean()) ** 2)) / (n - 2)
    assert abs(fit.psi[0, 0] - pooled) < 1e-7 * pooled
    assert abs(fit.beta[1] - (y1.mean() - y0.mean())) < 1e-8
    expected_var = pooled * (1.0 / len(y0) + 1.0 / len(y1))
    assert abs(fit.model_vcov[1, 1] - expected_var) < 1e-7 * expected_var


def test_fit_is_location_invariant():
    rng = np.random.default_rng(34)
    data = random_dataset(rng, 26, 3, missing="monotone")
    fit = fit_mmrm(data, _UNADJ)
    shifted = dataset(
        [record(r.id, r.arm, np.asarray(r.outcomes) + 10.0) for r in data.participants],
        3,
    )
    fit2 = fit_mmrm(shifted, _UNADJ)
    np.testing.assert_allclose(fit2.psi, fit.psi, rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(fit2.beta[:3], fit.beta[:3] + 10.0, atol=1e-6)
    np.testing.assert_allclose(fit2.beta[3:], fit.beta[3:], atol=1e-6)


def test_optimum_beats_a_parameter_grid():
    # Six complete participants at two visits keep the dense reference cheap
    # enough to sweep the whole three-parameter space.
    rng = np.random.default_rng(35)
    data = random_dataset(rng, 6, 2, missing="none")
    design, outcomes, xb, yb, obs = _blocks(data, _UNADJ)
    fit = fit_mmrm(data, _UNADJ)
    assert fit.converged_structure == "unstructured"

    spec = CovarianceSpec("unstructured", 2)
    axis = np.arange(-1.5, 1.5 + 1e-9, 0.15)
    best, argmin = np.inf, None
    for t0 in axis:
        for t1 in axis:
            for t2 in axis:
                theta = np.array([t0, t1, t2])
                val = dense_reml_objective(xb, yb, oracle_psi(theta, 2), obs)
                if val < best:
                    best, argmin = val, theta
    fine = [np.arange(c - 0.15, c + 0.15 + 1e-9, 0.015) for c in argmin]
    for t0 in fine[0]:
        for t1 in fine[1]:
            for t2 in fine[2]:
                theta = np.array([t0, t1, t2])
                val = dense_reml_objective(xb, yb, oracle_psi(theta, 2), obs)
                if val < best:
                    best, argmin = val, theta
    # the oracle and the engine share the log-Cholesky layout
    np.testing.assert_allclose(materialize(spec, argmin), oracle_psi(argmin, 2),
                               rtol=1e-12)
    assert fit.objective_value <= best + 1e-9
    assert abs(fit.objective_value - best) < 5e-3
    np.testing.assert_allclose(fit.phi, argmin, atol=0.02)


def test_fit_is_deterministic():
    rng = np.random.default_rng(36)
    data = random_dataset(rng, 30, 4, missing="monotone")
    spec = ModelSpec(adjust_prognostic=True)
    fit1 = fit_mmrm(data, spec)
    fit2 = fit_mmrm(data, spec)
    assert np.array_equal(fit1.beta, fit2.beta)
    assert np.array_equal(fit1.phi, fit2.phi)
    assert fit1.objective_value == fit2.objective_value
    assert fit1.converged_structure == fit2.converged_structure


def test_ladder_falls_back_when_unstructured_is_not_identifiable():
    # Three participants per arm at five visits: the pooled residual
    # covariance has rank at most four, so the saturated structure is
    # unbounded while the banded ones remain estimable.
    rng = np.random.default_rng(37)
    recs = [record(f"p{i}", i % 2, rng.normal(0.0, 1.0, 5)) for i in range(6)]
    fit = fit_mmrm(dataset(recs, 5), _UNADJ)
    assert fit.converged_structure in ("toeplitz", "compound_symmetry")
    kinds = [kind for kind, _ in fit.ladder_attempts]
    assert kinds[0] == "unstructured"
    assert "converged" not in fit.ladder_attempts[0][1]
    assert fit.ladder_attempts[-1][1] == "converged"


def test_intermittent_missingness_warns_but_fits():
    rng = np.random.default_rng(38)
    data = random_dataset(rng, 24, 3, missing="monotone")
    recs = list(data.participants)
    recs[0] = record("hole", recs[0].arm, [1.0, np.nan, 2.0])
    patched = dataset(recs, 3)
    with pytest.warns(UserWarning, match="intermittent"):
        fit = fit_mmrm(patched, _UNADJ)
    assert fit.converged


def test_fit_requires_more_observations_than_coefficients():
    recs = [record("a", 0, [1.0, 2.0]), record("b", 1, [0.5, 1.5])]
    with pytest.raises(DataError, match="observations"):
        fit_mmrm(dataset(recs, 2), _UNADJ)


def test_fit_raises_convergence_error_with_attempts():
    # A single-structure ladder that cannot be identified has nothing to
    # fall back to.
    rng = np.random.default_rng(39)
    recs = [record(f"p{i}", i % 2, rng.normal(0.0, 1.0, 5)) for i in range(6)]
    spec = ModelSpec(adjust_prognostic=False, covariance_ladder=("unstructured",))
    with pytest.raises(ConvergenceError) as exc:
        fit_mmrm(dataset(recs, 5), spec)
    assert exc.value.attempts and exc.value.attempts[0][0] == "unstructured"

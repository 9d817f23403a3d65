"""Robust covariance, degrees of freedom, and the effect summary."""

import dataclasses

import numpy as np
import pytest

from prognostic_mmrm import (
    ModelSpec,
    StateError,
    build_design,
    fit_mmrm,
    sandwich_vcov,
    satterthwaite_df,
    stack_outcomes,
    treatment_effect,
)

from oracles import hc0_ols_sandwich, welch_df
from util import dataset, random_dataset, record

_UNADJ = ModelSpec(adjust_prognostic=False)
_T975_DF60 = 2.00029782201426


def test_sandwich_single_visit_equals_classical_hc0():
    rng = np.random.default_rng(41)
    recs = [record(f"p{i}", i % 2, [float(rng.normal(0.4 * (i % 2), 1.0 + i % 2))])
            for i in range(40)]
    data = dataset(recs, 1)
    fit = fit_mmrm(data, _UNADJ)
    got = sandwich_vcov(fit)
    x = np.vstack([np.asarray(m) for m in fit.design.matrices])
    want = hc0_ols_sandwich(x, fit.outcomes)
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


def test_sandwich_is_symmetric_psd_across_random_fits():
    rng = np.random.default_rng(42)
    for _ in range(12):
        data = random_dataset(rng, 25, int(rng.integers(2, 5)), missing="monotone")
        fit = fit_mmrm(data, _UNADJ)
        v = sandwich_vcov(fit)
        np.testing.assert_allclose(v, v.T, atol=1e-12)
        assert np.linalg.eigvalsh(v).min() >= -1e-10


def test_sandwich_vanishes_on_exactly_fitted_outcomes():
    rng = np.random.default_rng(43)
    data = random_dataset(rng, 20, 3)
    fit = fit_mmrm(data, _UNADJ)
    fitted = np.concatenate([np.asarray(m) @ fit.beta for m in fit.design.matrices])
    v = sandwich_vcov(fit, design=fit.design, outcomes=fitted)
    np.testing.assert_allclose(v, np.zeros_like(v), atol=1e-12)


def test_sandwich_requires_converged_fit():
    rng = np.random.default_rng(44)
    fit = fit_mmrm(random_dataset(rng, 20, 2), _UNADJ)
    broken = dataclasses.replace(fit, converged=False)
    with pytest.raises(StateError):
        sandwich_vcov(broken)


def test_sandwich_tracks_model_vcov_under_correct_specification():
    rng = np.random.default_rng(45)
    data = random_dataset(rng, 600, 3, missing="monotone")
    fit = fit_mmrm(data, _UNADJ)
    robust = np.diag(sandwich_vcov(fit))
    model = np.diag(fit.model_vcov)
    np.testing.assert_allclose(robust, model, rtol=0.15)


def test_satterthwaite_single_visit_gives_pooled_df():
    rng = np.random.default_rng(46)
    recs = [record(f"a{i}", 0, [float(rng.normal())]) for i in range(9)]
    recs += [record(f"b{i}", 1, [float(rng.normal(0.5, 1.3))]) for i in range(13)]
    fit = fit_mmrm(dataset(recs, 1), _UNADJ)
    c = np.array([0.0, 1.0])
    df = satterthwaite_df(fit, c)
    assert abs(df - 20.0) < 1e-5
    df_mean = satterthwaite_df(fit, np.array([1.0, 0.0]))
    assert abs(df_mean - 20.0) < 1e-5


def test_satterthwaite_recovers_welch_for_disjoint_visit_groups():
    # Group A is observed only at the first visit, group B only at the
    # second, so the two visit variances are estimated from independent
    # samples and the cross covariance stays pinned at zero. A contrast
    # spanning both groups should then earn Welch-Satterthwaite degrees of
    # freedom rather than a pooled count.
    rng = np.random.default_rng(47)
    recs = []
    for i in range(8):
        recs.append(record(f"a{i}", i % 2, [float(rng.normal(0, 1.0)), np.nan]))
    for i in range(12):
        recs.append(record(f"b{i}", i % 2, [np.nan, float(rng.normal(0, 2.5))]))
    data = dataset(recs, 2)
    spec = ModelSpec(adjust_prognostic=False, covariance_ladder=("unstructured",))
    with pytest.warns(UserWarning, match="intermittent"):
        fit = fit_mmrm(data, spec)
    assert fit.phi[1] == 0.0  # the unobserved cross term never moves

    y0 = np.array([r.outcomes[0] for r in recs[:8]])
    y1 = np.array([r.outcomes[1] for r in recs[8:]])
    pooled = []
    for ys, arms in ((y0, [i % 2 for i in range(8)]), (y1, [i % 2 for i in range(12)])):
        arms = np.array(arms)
        sse = sum(np.sum((ys[arms == a] - ys[arms == a].mean()) ** 2) for a in (0, 1))
        pooled.append(sse / (len(ys) - 2))
    np.testing.assert_allclose(np.diag(fit.psi), pooled, rtol=1e-6)

    # treatment-effect difference across the two sub-experiments
    c = np.zeros(4)
    c[fit.design.treatment_column(1)] = 1.0
    c[fit.design.treatment_column(0)] = -1.0
    v_a = fit.psi[0, 0] * (1.0 / 4 + 1.0 / 4)
    v_b = fit.psi[1, 1] * (1.0 / 6 + 1.0 / 6)
    expected = welch_df(v_a * 7, 7, v_b * 11, 11)
    got = satterthwaite_df(fit, c)
    assert abs(got - expected) < 1e-3 * expected

    # a contrast living entirely in group B earns that group's df
    c_b = np.zeros(4)
    c_b[fit.design.treatment_column(1)] = 1.0
    assert abs(satterthwaite_df(fit, c_b) - 10.0) < 1e-3


def test_satterthwaite_stays_inside_bounds():
    rng = np.random.default_rng(48)
    for _ in range(6):
        data = random_dataset(rng, 20, 3, missing="monotone")
        fit = fit_mmrm(data, _UNADJ)
        c = rng.normal(size=fit.beta.shape[0])
        df = satterthwaite_df(fit, c)
        assert 1.0 <= df <= fit.n_observations - fit.beta.shape[0]


def test_satterthwaite_rejects_bad_contrasts():
    rng = np.random.default_rng(49)
    fit = fit_mmrm(random_dataset(rng, 20, 2), _UNADJ)
    with pytest.raises(ValueError):
        satterthwaite_df(fit, np.zeros(4))
    with pytest.raises(ValueError):
        satterthwaite_df(fit, np.ones(3))
    with pytest.raises(ValueError):
        satterthwaite_df(fit, np.array([1.0, np.nan, 0.0, 0.0]))


def test_treatment_effect_summary_fields():
    rng = np.random.default_rng(50)
    data = random_dataset(rng, 40, 3, missing="monotone", score_corr=0.5)
    fit = fit_mmrm(data, ModelSpec(adjust_prognostic=True))
    est = treatment_effect(fit, flavor="sandwich", alpha=0.05)
    col = fit.design.treatment_column(2)
    assert est.estimate == pytest.approx(fit.beta[col], abs=0.0)
    assert est.se == pytest.approx(np.sqrt(est.variance))
    assert est.ci_low < est.estimate < est.ci_high
    assert 0.0 <= est.p_value <= 1.0
    assert est.vcov_flavor == "sandwich"
    assert est.label.startswith("treat:")
    model = treatment_effect(fit, flavor="model")
    assert model.estimate == est.estimate
    assert model.variance != est.variance


def test_treatment_effect_p_value_is_sign_symmetric():
    rng = np.random.default_rng(51)
    data = random_dataset(rng, 30, 2, missing="monotone")
    flipped = dataset(
        [record(r.id, 1 - r.arm, r.outcomes) for r in data.participants], 2
    )
    est = treatment_effect(fit_mmrm(data, _UNADJ), flavor="model")
    mirrored = treatment_effect(fit_mmrm(flipped, _UNADJ), flavor="model")
    assert abs(est.estimate + mirrored.estimate) < 1e-7
    assert abs(est.p_value - mirrored.p_value) < 1e-7


def test_treatment_effect_interval_narrows_with_alpha():
    rng = np.random.default_rng(52)
    fit = fit_mmrm(random_dataset(rng, 30, 2), _UNADJ)
    wide = treatment_effect(fit, alpha=0.01)
    narrow = treatment_effect(fit, alpha=0.10)
    assert wide.ci_high - wide.ci_low > narrow.ci_high - narrow.ci_low
    assert wide.alpha == 0.01


def test_treatment_effect_residual_df_uses_t_quantile():
    rng = np.random.default_rng(53)
    # 64 participants, 4 coefficients: residual df of exactly 60
    recs = [record(f"p{i}", i % 2, rng.normal(0.0, 1.0, 2)) for i in range(64)]
    fit = fit_mmrm(dataset(recs, 2), _UNADJ)
    est = treatment_effect(fit, flavor="model", alpha=0.05, df_method="residual")
    assert est.df == 60.0
    half = (est.ci_high - est.ci_low) / 2.0
    assert abs(half / est.se - _T975_DF60) < 1e-9

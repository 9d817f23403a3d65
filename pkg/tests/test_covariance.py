"""Covariance structure parameterizations and their derivatives."""

import numpy as np
import pytest

from prognostic_mmrm import (
    CovarianceSpec,
    DecompositionError,
    ShapeError,
    extract_params,
    initialize_params,
    materialize,
    materialize_with_derivatives,
    subset,
)
from prognostic_mmrm.trial_data import ModelSpec, build_design

from util import random_dataset


def test_param_counts():
    assert CovarianceSpec("unstructured", 4).param_count == 10
    assert CovarianceSpec("toeplitz", 4).param_count == 4
    assert CovarianceSpec("compound_symmetry", 4).param_count == 2
    assert CovarianceSpec("unstructured", 1).param_count == 1


def test_unknown_kind_and_bad_dim_rejected():
    with pytest.raises(ValueError):
        CovarianceSpec("banded", 3)
    with pytest.raises(ValueError):
        CovarianceSpec("toeplitz", 0)


def test_unstructured_zero_params_give_identity():
    psi = materialize(CovarianceSpec("unstructured", 3), np.zeros(6))
    np.testing.assert_allclose(psi, np.eye(3), atol=1e-14)


def test_compound_symmetry_known_matrix():
    # at T=2 the correlation map reduces to plain tanh
    phi = np.array([np.log(2.0), np.arctanh(0.5)])
    psi = materialize(CovarianceSpec("compound_symmetry", 2), phi)
    np.testing.assert_allclose(psi, 4.0 * np.array([[1.0, 0.5], [0.5, 1.0]]), rtol=1e-12)


def test_toeplitz_single_lag_matches_tanh():
    phi = np.array([0.0, np.arctanh(0.3)])
    psi = materialize(CovarianceSpec("toeplitz", 2), phi)
    np.testing.assert_allclose(psi, np.array([[1.0, 0.3], [0.3, 1.0]]), rtol=1e-12)


def test_every_finite_parameter_gives_positive_definite():
    rng = np.random.default_rng(20317)
    for _ in range(300):
        kind = rng.choice(["unstructured", "toeplitz", "compound_symmetry"])
        dim = int(rng.integers(1, 9))
        spec = CovarianceSpec(str(kind), dim)
        phi = rng.normal(0.0, 1.5, size=spec.param_count)
        psi = materialize(spec, phi)
        assert np.all(np.isfinite(psi))
        assert np.linalg.eigvalsh(psi).min() > 0.0
        np.testing.assert_allclose(psi, psi.T, atol=1e-12)


def test_unstructured_round_trip_is_exact():
    rng = np.random.default_rng(99)
    for dim in (1, 2, 4, 6):
        spec = CovarianceSpec("unstructured", dim)
        phi = rng.normal(0.0, 0.8, size=spec.param_count)
        back = extract_params(spec, materialize(spec, phi))
        np.testing.assert_allclose(back, phi, atol=1e-10)


def test_structured_round_trip_on_exactly_structured_matrices():
    spec_cs = CovarianceSpec("compound_symmetry", 4)
    target = 2.5 * (0.35 * np.ones((4, 4)) + 0.65 * np.eye(4))
    np.testing.assert_allclose(
        materialize(spec_cs, extract_params(spec_cs, target)), target, rtol=1e-9
    )
    spec_tp = CovarianceSpec("toeplitz", 4)
    from scipy.linalg import toeplitz
    target = 1.7 * toeplitz([1.0, 0.45, 0.2, 0.05])
    np.testing.assert_allclose(
        materialize(spec_tp, extract_params(spec_tp, target)), target, rtol=1e-8
    )


def test_extract_rejects_non_positive_definite():
    bad = np.array([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(DecompositionError):
        extract_params(CovarianceSpec("unstructured", 2), bad)


def test_materialize_shape_and_finiteness_errors():
    spec = CovarianceSpec("toeplitz", 3)
    with pytest.raises(ShapeError):
        materialize(spec, np.zeros(5))
    with pytest.raises(ValueError):
        materialize(spec, np.array([0.0, np.nan, 0.1]))


def test_subset_selects_principal_block():
    psi = np.array([[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]])
    np.testing.assert_allclose(subset(psi, [0, 2]),
                               np.array([[4.0, 0.5], [0.5, 2.0]]))
    np.testing.assert_allclose(subset(psi, [1]), np.array([[3.0]]))


def test_subset_keeps_positive_definiteness():
    rng = np.random.default_rng(431)
    for _ in range(100):
        dim = int(rng.integers(2, 8))
        spec = CovarianceSpec("unstructured", dim)
        psi = materialize(spec, rng.normal(0.0, 1.0, size=spec.param_count))
        k = int(rng.integers(1, dim + 1))
        obs = np.sort(rng.choice(dim, size=k, replace=False))
        assert np.linalg.eigvalsh(subset(psi, obs)).min() > 0.0


def test_subset_index_validation():
    psi = np.eye(3)
    with pytest.raises(IndexError):
        subset(psi, [])
    with pytest.raises(IndexError):
        subset(psi, [0, 0])
    with pytest.raises(IndexError):
        subset(psi, [2, 1])
    with pytest.raises(IndexError):
        subset(psi, [0, 3])


def test_derivatives_match_finite_differences():
    rng = np.random.default_rng(7112)
    for kind in ("unstructured", "toeplitz", "compound_symmetry"):
        for dim in (1, 2, 3, 5):
            spec = CovarianceSpec(kind, dim)
            for _ in range(4):
                phi = rng.normal(0.0, 0.7, size=spec.param_count)
                psi, dpsi = materialize_with_derivatives(spec, phi)
                np.testing.assert_allclose(psi, materialize(spec, phi), atol=1e-13)
                for k in range(spec.param_count):
                    h = 1e-6 * max(1.0, abs(phi[k]))
                    up = phi.copy()
                    up[k] += h
                    down = phi.copy()
                    down[k] -= h
                    fd = (materialize(spec, up) - materialize(spec, down)) / (2 * h)
                    scale = max(1.0, np.abs(fd).max())
                    assert np.abs(dpsi[k] - fd).max() < 1e-6 * scale, (kind, dim, k)


def test_initialize_params_matches_complete_data_residual_covariance():
    rng = np.random.default_rng(88)
    data = random_dataset(rng, 40, 3, missing="none")
    spec = ModelSpec(adjust_prognostic=True)
    design = build_design(data, spec)
    cov_spec = CovarianceSpec("unstructured", 3)
    phi0 = initialize_params(data, design, cov_spec)
    psi0 = materialize(cov_spec, phi0)

    # independent recomputation: OLS residuals, plain covariance with n counts
    x = np.vstack([np.asarray(m) for m in design.matrices])
    y = np.concatenate([rec.outcomes for rec in data.participants])
    beta = np.linalg.lstsq(x, y, rcond=None)[0]
    resid = (y - x @ beta).reshape(len(data.participants), 3)
    expected = resid.T @ resid / len(data.participants)
    np.testing.assert_allclose(psi0, expected, rtol=1e-8, atol=1e-10)


def test_initialize_params_recovers_scale_at_moderate_n():
    rng = np.random.default_rng(3145)
    data = random_dataset(rng, 600, 2, missing="monotone")
    spec = ModelSpec(adjust_prognostic=True)
    design = build_design(data, spec)
    phi0 = initialize_params(data, design, CovarianceSpec("unstructured", 2))
    psi0 = materialize(CovarianceSpec("unstructured", 2), phi0)
    # generator noise is exchangeable with unit variances
    assert 0.7 < psi0[0, 0] < 1.4
    assert 0.7 < psi0[1, 1] < 1.4
    assert 0.1 < psi0[0, 1] / np.sqrt(psi0[0, 0] * psi0[1, 1]) < 0.7

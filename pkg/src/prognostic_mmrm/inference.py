"""Treatment-effect inference on fitted repeated-measures models.

The estimand is the treatment-by-time coefficient at the final scheduled
visit. Its variance can come from two places:

* ``model``: the inverse accumulated information (X' Omega^-1 X)^-1 at the
  fitted covariance parameters.
* ``sandwich``: the Huber-White estimator A^-1 B A^-1 with the HC0 meat
  B = sum_i X_i' R_i^-1 r_i r_i' R_i^-1 X_i built from per-participant
  residual outer products.

Reference distributions are t with Satterthwaite degrees of freedom: the
quotient 2 (c'Vc)^2 / (g' I^-1 g), where g is the gradient of the contrast
variance in the covariance parameters and I the expected restricted-likelihood
information. A plain residual df (participants minus coefficients) is
available as a fallback for callers that want the classical convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import StateError
from .reml_engine import FitResult, _Workspace

_FD_STEP = 1e-4


@dataclass(frozen=True)
class EffectEstimate:
    """Point estimate, uncertainty, and test for one coefficient contrast.

    Attributes:
        estimate: contrast value in outcome units.
        se: standard error under the chosen covariance flavor.
        variance: se squared.
        df: reference-distribution degrees of freedom.
        t_stat: estimate / se.
        p_value: two-sided p from the t reference.
        ci_low: lower confidence bound.
        ci_high: upper confidence bound.
        vcov_flavor: "model" or "sandwich".
        alpha: two-sided level the interval was built at.
        label: design-column label of the contrast coefficient.
    """

    estimate: float
    se: float
    variance: float
    df: float
    t_stat: float
    p_value: float
    ci_low: float
    ci_high: float
    vcov_flavor: str
    alpha: float
    label: str


def _require_converged(fit: FitResult):
    if not getattr(fit, "converged", False):
        raise StateError("inference requires a converged fit")


def sandwich_vcov(fit: FitResult, design=None, outcomes=None) -> np.ndarray:
    """Huber-White covariance of the coefficients (HC0 meat).

    ``design`` and ``outcomes`` default to the ones the fit was computed on;
    passing them explicitly evaluates the same coefficient vector and fitted
    structure matrix against different data.

    Raises:
        StateError: the fit is not flagged converged.
    """
    _require_converged(fit)
    if design is None and outcomes is None:
        workspace = fit.workspace
    else:
        workspace = _Workspace(
            fit.design if design is None else design,
            fit.outcomes if outcomes is None else outcomes,
        )
    psi = fit.psi
    beta = fit.beta
    meat = np.zeros((workspace.p, workspace.p))
    for pat in workspace.patterns:
        r = psi[np.ix_(pat.indices, pat.indices)]
        rinv = np.linalg.inv(r)
        resid = pat.y - pat.x @ beta                 # (m, s)
        weighted = resid @ rinv                      # (m, s)
        z = np.einsum("msp,ms->mp", pat.x, weighted)
        meat += z.T @ z
    bread = fit.model_vcov
    vcov = bread @ meat @ bread
    return (vcov + vcov.T) / 2.0


def satterthwaite_df(fit: FitResult, contrast: np.ndarray) -> float:
    """Moment-matching degrees of freedom for a coefficient contrast.

    Computes 2 (c'Vc)^2 / (g' A g) with g the central-difference gradient of
    phi -> c' V(phi) c and A the pseudo-inverse of the expected
    restricted-likelihood information at the fitted parameters. The result is
    clamped to [1, n_observations - n_coefficients]; a nonpositive or
    non-finite denominator falls back to the clamp's upper end.

    Raises:
        StateError: the fit is not flagged converged.
        ValueError: zero, non-finite, or wrongly shaped contrast.
    """
    _require_converged(fit)
    contrast = np.asarray(contrast, dtype=float)
    p = fit.design.n_columns
    if contrast.shape != (p,):
        raise ValueError(f"contrast must have shape ({p},), got {contrast.shape}")
    if not np.all(np.isfinite(contrast)):
        raise ValueError("contrast contains non-finite entries")
    if not np.any(contrast):
        raise ValueError("contrast is identically zero")

    workspace = fit.workspace
    spec = fit.covariance_spec
    phi = fit.phi
    cvc = float(contrast @ fit.model_vcov @ contrast)

    grad = np.zeros(len(phi))
    for k in range(len(phi)):
        h = _FD_STEP * max(1.0, abs(phi[k]))
        up = phi.copy()
        up[k] += h
        down = phi.copy()
        down[k] -= h
        grad[k] = (
            workspace.contrast_variance(spec, up, contrast)
            - workspace.contrast_variance(spec, down, contrast)
        ) / (2.0 * h)

    info = workspace.expected_information(spec, phi)
    denom = float(grad @ np.linalg.pinv(info) @ grad)
    upper = float(max(workspace.n_obs - p, 1))
    if not np.isfinite(denom) or denom <= 0.0:
        return upper
    df = 2.0 * cvc * cvc / denom
    return float(min(max(df, 1.0), upper))


def treatment_effect(fit: FitResult, flavor: str = "sandwich", alpha: float = 0.05,
                     df_method: str = "satterthwaite") -> EffectEstimate:
    """Estimate, test, and confidence interval for the final-visit effect.

    Args:
        fit: converged model fit.
        flavor: "sandwich" (robust, default) or "model" coefficient covariance.
        alpha: two-sided level; the interval has coverage 1 - alpha.
        df_method: "satterthwaite" (default) or "residual", the latter being
            n_participants - n_coefficients (floored at 1).

    Raises:
        StateError: the fit is not flagged converged.
        ValueError: unknown flavor or df method, or alpha outside (0, 1).
    """
    _require_converged(fit)
    if flavor not in ("model", "sandwich"):
        raise ValueError(f"unknown vcov flavor {flavor!r}; expected 'model' or 'sandwich'")
    if df_method not in ("satterthwaite", "residual"):
        raise ValueError(f"unknown df method {df_method!r}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")

    col = fit.design.treatment_column(fit.design.n_visits - 1)
    contrast = np.zeros(fit.design.n_columns)
    contrast[col] = 1.0
    vcov = fit.model_vcov if flavor == "model" else sandwich_vcov(fit)
    variance = float(contrast @ vcov @ contrast)
    variance = max(variance, 0.0)
    se = math.sqrt(variance)
    estimate = float(fit.beta[col])

    if df_method == "satterthwaite":
        df = satterthwaite_df(fit, contrast)
    else:
        df = float(max(fit.n_participants - fit.design.n_columns, 1))

    if se > 0.0:
        t_stat = estimate / se
        p_value = 2.0 * float(stats.t.sf(abs(t_stat), df))
        half = float(stats.t.ppf(1.0 - alpha / 2.0, df)) * se
    else:
        t_stat = 0.0 if estimate == 0.0 else math.copysign(math.inf, estimate)
        p_value = 1.0 if estimate == 0.0 else 0.0
        half = 0.0
    return EffectEstimate(
        estimate=estimate,
        se=se,
        variance=variance,
        df=df,
        t_stat=t_stat,
        p_value=p_value,
        ci_low=estimate - half,
        ci_high=estimate + half,
        vcov_flavor=flavor,
        alpha=alpha,
        label=fit.beta_labels[col],
    )

"""Monte Carlo scenario battery for score-adjusted repeated-measures analysis.

Four five-visit scenarios are generated from a joint multivariate-normal model
of outcomes, time-matched prognostic scores, and three baseline covariates:

* ``Linear``: outcomes track the scores; the treatment effect ramps linearly
  across visits to its final-visit value.
* ``AdditionalCovariates``: three baseline covariates each carry extra
  outcome correlation and both analysis models adjust for them.
* ``Shifted``: the scores the analyst sees are noisily shifted per
  participant after the outcomes are generated, degrading their value.
* ``Heterogeneous``: the treated-arm effect varies with the baseline
  covariates (mean zero), so individual effects spread around the marginal.

Dropout is monotone with a per-visit hazard logistic in the baseline
covariates; the intercept is calibrated by bisection against Gauss-Hermite
quadrature so the expected missingness at the final visit hits the target.

The per-replicate random stream is derived from (base seed, replicate index)
only, so studies are reproducible bit for bit regardless of worker count, and
scenarios that share a base seed share their underlying draws where the
generators coincide.
"""

from __future__ import annotations

import functools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, ndtri

from .errors import CalibrationError, DataError, MmrmError, StudyError
from .inference import treatment_effect
from .reml_engine import fit_mmrm
from .trial_data import (
    ModelSpec,
    ParticipantRecord,
    TrialDataset,
    VisitSchedule,
    subsample_participants,
)

SCENARIO_KINDS = ("Linear", "AdditionalCovariates", "Shifted", "Heterogeneous")

_VISITS = 5
_N_BASELINE_COVARIATES = 3
_INTERVISIT_CORR = 0.75
_CALIBRATION_EFFECT = 1.2     # reference effect for the variance calibration
_CALIBRATION_POWER = 0.80
_CALIBRATION_ALPHA = 0.05
_COVARIATE_OUTCOME_CORR = 0.25
_HET_SLOPE = 0.4              # final-visit spread of individual effects
_DROPOUT_SLOPE = 0.4          # hazard coefficient on each baseline covariate
_SHIFT_MEANS = (-0.3, -0.5, -1.0, -2.0, -2.5)
_SHIFT_SDS = (3.0, 4.0, 6.0, 7.0, 8.0)
_TRUE_EFFECT_DRAWS = 2_000_000
_TRUE_EFFECT_SEED = 715
_STUDY_ALPHA = 0.05


def normalize_kind(name: str) -> str:
    """Map a loosely spelled scenario name onto its canonical form."""
    key = name.replace("-", "").replace("_", "").lower()
    for kind in SCENARIO_KINDS:
        if kind.lower() == key:
            return kind
    raise ValueError(f"unknown scenario kind {name!r}; expected one of {SCENARIO_KINDS}")


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation scenario, fully specified.

    Attributes:
        kind: one of ``SCENARIO_KINDS``.
        n_per_arm: participants per arm before dropout.
        true_effect: final-visit treatment effect (marginal, outcome units).
        target_correlation: score-outcome correlation aimed for at each visit.
        dropout_target: expected missingness proportion at the final visit.
        replicates: Monte Carlo replicate count.
        base_seed: root of every replicate's random stream.
        visits: scheduled visit count; the battery is defined on five.
    """

    kind: str
    n_per_arm: int = 1000
    true_effect: float = -1.2
    target_correlation: float = 0.5
    dropout_target: float = 0.30
    replicates: int = 2500
    base_seed: int = 0
    visits: int = _VISITS

    def __post_init__(self):
        object.__setattr__(self, "kind", normalize_kind(self.kind))
        if self.visits != _VISITS:
            raise ValueError(f"the scenario battery is defined on {_VISITS} visits")
        if self.n_per_arm < 2:
            raise ValueError(f"need at least 2 participants per arm, got {self.n_per_arm}")
        if not -1.0 < self.target_correlation < 1.0:
            raise ValueError(
                f"target correlation must lie in (-1, 1), got {self.target_correlation}"
            )
        if not 0.0 <= self.dropout_target < 1.0:
            raise ValueError(
                f"dropout target must lie in [0, 1), got {self.dropout_target}"
            )
        if self.replicates < 1:
            raise ValueError(f"replicate count must be >= 1, got {self.replicates}")
        if not math.isfinite(self.true_effect):
            raise ValueError("true_effect must be finite")
        if self.base_seed < 0:
            raise ValueError(f"base seed must be nonnegative, got {self.base_seed}")


@dataclass(frozen=True, eq=False)
class JointCovariance:
    """Joint covariance of (outcomes, scores[, baseline covariates]).

    Layout: rows/columns 0..T-1 are outcomes by visit, T..2T-1 the
    time-matched scores, and any remainder the baseline covariates.
    """

    matrix: np.ndarray
    visits: int
    n_covariates: int
    cross_scale: float = 1.0

    @property
    def yy(self) -> np.ndarray:
        return self.matrix[: self.visits, : self.visits]

    @property
    def xx(self) -> np.ndarray:
        t = self.visits
        return self.matrix[t: 2 * t, t: 2 * t]

    @property
    def yx(self) -> np.ndarray:
        t = self.visits
        return self.matrix[:t, t: 2 * t]


def _visit_variances(config: ScenarioConfig) -> np.ndarray:
    """Per-visit outcome variances rising linearly to the calibrated final one.

    The final-visit variance is set so a two-sample test on the expected
    completers has the reference power at the reference effect size.
    """
    z_alpha = float(ndtri(1.0 - _CALIBRATION_ALPHA / 2.0))
    z_power = float(ndtri(_CALIBRATION_POWER))
    completers = (1.0 - config.dropout_target) * config.n_per_arm
    final_var = _CALIBRATION_EFFECT ** 2 * completers / (2.0 * (z_alpha + z_power) ** 2)
    t = config.visits
    return final_var * np.arange(1, t + 1) / t


def build_joint_covariance(config: ScenarioConfig) -> JointCovariance:
    """Construct the scenario's joint covariance matrix.

    Outcome block: common inter-visit correlation with per-visit variances
    from :func:`_visit_variances`. Score block mirrors the outcome block.
    Cross block is ``rho * score block`` so every visit's score-outcome
    correlation equals the target. The AdditionalCovariates scenario appends
    three unit-variance covariates, each correlated 0.25 with every visit's
    outcome. If the assembled matrix is not positive definite the cross
    blocks are backed off by 5% steps.

    Raises:
        CalibrationError: no positive definite matrix within the backoff budget.
    """
    t = config.visits
    rho = config.target_correlation
    sds = np.sqrt(_visit_variances(config))
    corr = np.full((t, t), _INTERVISIT_CORR)
    np.fill_diagonal(corr, 1.0)
    block = np.outer(sds, sds) * corr

    with_covariates = config.kind == "AdditionalCovariates"
    k = _N_BASELINE_COVARIATES if with_covariates else 0
    dim = 2 * t + k

    scale = 1.0
    for _ in range(400):
        full = np.zeros((dim, dim))
        full[:t, :t] = block
        full[t: 2 * t, t: 2 * t] = block
        full[:t, t: 2 * t] = scale * rho * block
        full[t: 2 * t, :t] = scale * rho * block
        if with_covariates:
            full[2 * t:, 2 * t:] = np.eye(k)
            yz = scale * _COVARIATE_OUTCOME_CORR * np.outer(sds, np.ones(k))
            full[:t, 2 * t:] = yz
            full[2 * t:, :t] = yz.T
        if float(np.linalg.eigvalsh(full).min()) > 1e-8:
            return JointCovariance(matrix=full, visits=t, n_covariates=k, cross_scale=scale)
        scale *= 0.95
    raise CalibrationError(
        f"correlation target {rho} is infeasible for the {config.kind} scenario"
    )


@functools.lru_cache(maxsize=32)
def _dropout_intercept(target: float, visits: int, slope: float, n_covariates: int) -> float:
    """Hazard intercept hitting the expected final-visit missingness target.

    The per-visit hazard is ``sigmoid(eta0 + u)`` with
    ``u = slope * sum(covariates) ~ Normal(0, slope^2 * K)``; the expectation
    of cumulative dropout over u is integrated by Gauss-Hermite quadrature and
    eta0 is found by bisection.

    Raises:
        CalibrationError: the bisection bracket does not contain the target.
    """
    sigma_u = slope * math.sqrt(n_covariates)
    nodes, weights = np.polynomial.hermite.hermgauss(80)
    u = math.sqrt(2.0) * sigma_u * nodes
    weights = weights / math.sqrt(math.pi)
    hazard_visits = visits - 1

    def expected_dropout(eta0: float) -> float:
        keep = (1.0 - expit(eta0 + u)) ** hazard_visits
        return 1.0 - float(weights @ keep)

    lo, hi = -40.0, 15.0
    if not expected_dropout(lo) <= target <= expected_dropout(hi):
        raise CalibrationError(f"dropout target {target} is outside the calibratable range")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if expected_dropout(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate_trial(config: ScenarioConfig, joint: JointCovariance, seed) -> TrialDataset:
    """Draw one trial dataset for the scenario.

    The random stream is consumed in a fixed order (joint normals, extra
    covariate normals, dropout uniforms, score-shift noise) so scenarios that
    share a seed share draws up to the point where their generators differ.
    """
    t = config.visits
    n = 2 * config.n_per_arm
    rng = np.random.default_rng(seed)

    chol = np.linalg.cholesky(joint.matrix)
    draws = rng.standard_normal((n, joint.matrix.shape[0])) @ chol.T
    y = draws[:, :t].copy()
    x = draws[:, t: 2 * t]
    if joint.n_covariates:
        z = draws[:, 2 * t:]
    else:
        z = rng.standard_normal((n, _N_BASELINE_COVARIATES))

    arms = np.zeros(n, dtype=int)
    arms[config.n_per_arm:] = 1
    ramp = np.arange(1, t + 1) / t
    effect = config.true_effect * ramp
    y[arms == 1] += effect
    if config.kind == "Heterogeneous":
        spread = z.sum(axis=1) / math.sqrt(z.shape[1])
        y[arms == 1] += np.outer(spread[arms == 1], _HET_SLOPE * ramp)

    if config.dropout_target > 0.0:
        uniforms = rng.random((n, t - 1))
        eta0 = _dropout_intercept(config.dropout_target, t,
                                  _DROPOUT_SLOPE, _N_BASELINE_COVARIATES)
        hazard = expit(eta0 + _DROPOUT_SLOPE * z.sum(axis=1))
        dropped = uniforms < hazard[:, None]
        any_drop = dropped.any(axis=1)
        first = dropped.argmax(axis=1)
        last_observed = np.where(any_drop, first, t - 1)   # visit index, 0-based
    else:
        last_observed = np.full(n, t - 1)

    scores = x
    if config.kind == "Shifted":
        noise = rng.standard_normal((n, t))
        scores = x + np.asarray(_SHIFT_MEANS) + np.asarray(_SHIFT_SDS) * noise

    participants = []
    visit_idx = np.arange(t)
    for i in range(n):
        outcomes = np.where(visit_idx <= last_observed[i], y[i], np.nan)
        participants.append(ParticipantRecord(
            id=f"p{i + 1:05d}",
            arm=int(arms[i]),
            outcomes=outcomes,
            prognostic_scores=scores[i],
            baseline_covariates=z[i],
        ))
    return TrialDataset(
        schedule=VisitSchedule.of_count(t),
        participants=tuple(participants),
        covariate_names=tuple(f"z{j + 1}" for j in range(_N_BASELINE_COVARIATES)),
    )


def true_effect(config: ScenarioConfig, joint: JointCovariance) -> float:
    """Marginal final-visit effect implied by the generator.

    Constant-effect scenarios return the configured value exactly. The
    Heterogeneous scenario averages the individual final-visit effect over a
    large fixed-seed Monte Carlo draw of the baseline covariates (both
    potential outcomes share the participant's residual draw, so the
    individual effect is the deterministic covariate term).
    """
    if config.kind != "Heterogeneous":
        return float(config.true_effect)
    rng = np.random.default_rng(_TRUE_EFFECT_SEED)
    spread = rng.standard_normal(_TRUE_EFFECT_DRAWS)
    return float(config.true_effect + _HET_SLOPE * spread.mean())


# ---------------------------------------------------------------------------
# Study runner
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MethodOutcome:
    """One analysis method's result on one replicate."""

    estimate: float
    variance: float
    ci_low: float
    ci_high: float
    reject: bool
    structure: str


@dataclass(frozen=True)
class ReplicateResult:
    """Both methods' results on one replicate (or the failure that ate it)."""

    replicate: int
    seed: tuple
    mmrm: MethodOutcome | None
    procova: MethodOutcome | None
    error: str | None = None


@dataclass(frozen=True)
class MethodSummary:
    """Operating characteristics of one method over the completed replicates."""

    method: str
    mean_estimate: float
    bias: float
    average_variance: float
    coverage: float
    rejection_rate: float


@dataclass(frozen=True)
class SimulationReport:
    """Aggregated study results plus the raw per-replicate rows."""

    config: ScenarioConfig
    true_effect: float
    mmrm: MethodSummary
    procova: MethodSummary
    n_replicates: int
    n_failures: int
    replicates: tuple = field(repr=False)


def _model_specs(kind: str) -> tuple[ModelSpec, ModelSpec]:
    baseline = tuple(range(_N_BASELINE_COVARIATES)) if kind == "AdditionalCovariates" else ()
    return (
        ModelSpec(adjust_prognostic=False, adjust_baseline=baseline),
        ModelSpec(adjust_prognostic=True, adjust_baseline=baseline),
    )


def _method_outcome(data: TrialDataset, spec: ModelSpec) -> MethodOutcome:
    fit = fit_mmrm(data, spec)
    eff = treatment_effect(fit, flavor="sandwich", alpha=_STUDY_ALPHA)
    return MethodOutcome(
        estimate=eff.estimate,
        variance=eff.variance,
        ci_low=eff.ci_low,
        ci_high=eff.ci_high,
        reject=bool(eff.p_value < _STUDY_ALPHA),
        structure=fit.converged_structure,
    )


def _run_replicate(args) -> ReplicateResult:
    config, joint, rep = args
    seed = (config.base_seed, rep)
    try:
        data = generate_trial(config, joint, np.random.SeedSequence(list(seed)))
        unadjusted_spec, adjusted_spec = _model_specs(config.kind)
        mmrm = _method_outcome(data, unadjusted_spec)
        procova = _method_outcome(data, adjusted_spec)
        return ReplicateResult(replicate=rep, seed=seed, mmrm=mmrm, procova=procova)
    except MmrmError as exc:
        return ReplicateResult(replicate=rep, seed=seed, mmrm=None, procova=None,
                               error=f"{type(exc).__name__}: {exc}")


def _summarize(method: str, outcomes, truth: float) -> MethodSummary:
    estimates = np.array([o.estimate for o in outcomes])
    variances = np.array([o.variance for o in outcomes])
    covered = np.array([o.ci_low <= truth <= o.ci_high for o in outcomes])
    rejected = np.array([o.reject for o in outcomes])
    mean_est = float(estimates.mean())
    return MethodSummary(
        method=method,
        mean_estimate=mean_est,
        bias=mean_est - truth,
        average_variance=float(variances.mean()),
        coverage=float(covered.mean()),
        rejection_rate=float(rejected.mean()),
    )


def run_study(config: ScenarioConfig, workers: int = 1) -> SimulationReport:
    """Run the full Monte Carlo study for one scenario.

    Each replicate generates a trial, fits the unadjusted and score-adjusted
    models, and records sandwich-variance treatment effects at the 0.05 level.
    Replicate failures are excluded from the aggregates and counted.

    Args:
        config: scenario description including replicate count and base seed.
        workers: process count; results are identical for any worker count.

    Raises:
        StudyError: more than 1% of replicates failed, or none succeeded.
    """
    joint = build_joint_covariance(config)
    truth = true_effect(config, joint)
    tasks = [(config, joint, rep) for rep in range(config.replicates)]
    if workers > 1:
        chunk = max(1, config.replicates // (workers * 8))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_replicate, tasks, chunksize=chunk))
    else:
        results = [_run_replicate(task) for task in tasks]

    completed = [r for r in results if r.error is None]
    n_failures = len(results) - len(completed)
    if not completed or n_failures > 0.01 * config.replicates:
        messages = sorted({r.error for r in results if r.error is not None})
        raise StudyError(
            f"{n_failures} of {config.replicates} replicates failed; "
            f"distinct errors: {messages[:5]}"
        )
    return SimulationReport(
        config=config,
        true_effect=truth,
        mmrm=_summarize("MMRM", [r.mmrm for r in completed], truth),
        procova=_summarize("PROCOVA-MMRM", [r.procova for r in completed], truth),
        n_replicates=len(completed),
        n_failures=n_failures,
        replicates=tuple(results),
    )


# ---------------------------------------------------------------------------
# Subsampling study
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SubsampleStudyResult:
    """Distribution of the adjusted-model variance over participant subsamples."""

    fraction: float
    reps: int
    mean_variance: float
    sd_variance: float
    full_data_unadjusted_variance: float
    n_failures: int
    variances: tuple = field(repr=False)


def subsample_variance_study(data: TrialDataset, fraction: float, reps: int,
                             seed: int) -> SubsampleStudyResult:
    """Refit the score-adjusted model on repeated subsamples of the dataset.

    Each rep draws a per-arm subsample of the given fraction, refits the
    adjusted model, and records the sandwich variance of the final-visit
    treatment effect. The full-data unadjusted variance is returned alongside
    for the efficiency comparison.

    Raises:
        ValueError: fraction outside (0, 1] or reps < 1.
        StudyError: every rep failed.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if reps < 1:
        raise ValueError(f"reps must be >= 1, got {reps}")
    full_fit = fit_mmrm(data, ModelSpec(adjust_prognostic=False))
    full_variance = treatment_effect(full_fit, flavor="sandwich").variance

    adjusted = ModelSpec(adjust_prognostic=True)
    variances = []
    n_failures = 0
    for rep in range(reps):
        sub = subsample_participants(data, fraction, np.random.SeedSequence([seed, rep]))
        try:
            fit = fit_mmrm(sub, adjusted)
            variances.append(treatment_effect(fit, flavor="sandwich").variance)
        except MmrmError:
            n_failures += 1
    if not variances:
        raise StudyError(f"all {reps} subsample refits failed")
    arr = np.array(variances)
    return SubsampleStudyResult(
        fraction=fraction,
        reps=reps,
        mean_variance=float(arr.mean()),
        sd_variance=float(arr.std(ddof=1)) if len(arr) > 1 else 0.0,
        full_data_unadjusted_variance=float(full_variance),
        n_failures=n_failures,
        variances=tuple(float(v) for v in arr),
    )


# ---------------------------------------------------------------------------
# Effective-sample-size arithmetic and the precision ordering check
# ---------------------------------------------------------------------------

def ess(v_benchmark: float, v_new: float, n: float) -> float:
    """Effective sample size: n scaled by the benchmark-to-new variance ratio.

    Raises:
        ValueError: any nonpositive input.
    """
    if not (v_benchmark > 0.0 and v_new > 0.0 and n > 0.0):
        raise ValueError("ess needs positive variances and sample size")
    return n * v_benchmark / v_new


def taylor_n0(n0: float, n1: float, v_benchmark: float, f, f_prime) -> float:
    """First-order control-arm size correction from a precision function.

    ``f`` maps a control-arm size to the precision (inverse variance) of the
    benchmark-method estimate; the linearization around ``n0`` gives

        N0 = n0 - (ESS - N1) / (N1 * v_benchmark * f'(n0))

    with ESS computed against ``v_new = 1 / f(n0)``. For linear ``f`` this
    recovers the exact solve.

    Raises:
        ValueError: nonpositive sizes or benchmark variance, f(n0) <= 0, or
            f'(n0) <= 0 (the approximation assumes increasing precision).
    """
    if not (n0 > 0.0 and n1 > 0.0 and v_benchmark > 0.0):
        raise ValueError("sizes and benchmark variance must be positive")
    fp = float(f_prime(n0))
    if fp <= 0.0:
        raise ValueError(f"precision derivative must be positive at n0, got {fp}")
    fv = float(f(n0))
    if fv <= 0.0:
        raise ValueError(f"precision must be positive at n0, got {fv}")
    ess_value = ess(v_benchmark, 1.0 / fv, n1)
    return n0 - (ess_value - n1) / (n1 * v_benchmark * fp)


@dataclass(frozen=True)
class PsdOrderingReport:
    """Comparison of full-data and complete-case precision at a common structure."""

    min_eigenvalue: float
    full_variance: float
    complete_case_variance: float
    n_participants: int
    n_complete: int
    psi_fitted: bool


def psd_ordering_check(data: TrialDataset, spec: ModelSpec,
                       psi: np.ndarray | None = None) -> PsdOrderingReport:
    """Verify the information ordering between full data and complete cases.

    Holding one structure matrix fixed (fitted from the data unless supplied),
    the full-data information minus the complete-case information must be
    positive semidefinite, and the implied final-visit treatment-effect
    variance from all data must not exceed the complete-case one.

    Raises:
        DataError: no complete cases, or completers lack one of the arms.
    """
    from .reml_engine import _Workspace
    from .trial_data import build_design, stack_outcomes

    t = data.schedule.visit_count
    complete = tuple(rec for rec in data.participants
                     if bool(np.all(rec.observed_mask)))
    if not complete:
        raise DataError("no complete cases to compare against")

    if psi is None:
        fit = fit_mmrm(data, spec)
        psi = fit.psi
        psi_fitted = True
    else:
        psi = np.asarray(psi, dtype=float)
        if psi.shape != (t, t):
            raise ValueError(f"psi must be {t}x{t}, got {psi.shape}")
        psi_fitted = False

    design_full = build_design(data, spec)
    a_full = _Workspace(design_full, stack_outcomes(data, design_full)).normal_equations(psi)[0]
    complete_data = TrialDataset(schedule=data.schedule, participants=complete,
                                 covariate_names=data.covariate_names)
    design_cc = build_design(complete_data, spec)
    a_cc = _Workspace(design_cc, stack_outcomes(complete_data, design_cc)).normal_equations(psi)[0]

    contrast = np.zeros(design_full.n_columns)
    contrast[design_full.treatment_column(t - 1)] = 1.0
    full_variance = float(contrast @ np.linalg.solve(a_full, contrast))
    complete_case_variance = float(contrast @ np.linalg.solve(a_cc, contrast))
    min_eig = float(np.linalg.eigvalsh(a_full - a_cc).min())
    return PsdOrderingReport(
        min_eigenvalue=min_eig,
        full_variance=full_variance,
        complete_case_variance=complete_case_variance,
        n_participants=data.n_participants,
        n_complete=len(complete),
        psi_fitted=psi_fitted,
    )

"""Prognostic-score-adjusted analysis of repeated-measures trials.

The package fits mixed models for repeated measures by restricted maximum
likelihood with a covariance-structure fallback ladder, reports
treatment-effect inference with robust (Huber-White) variances and
Satterthwaite degrees of freedom, plans sample sizes under prognostic
covariate adjustment, and ships a Monte Carlo harness for the operating
characteristics of the adjusted versus unadjusted analyses.
"""

from ._version import __version__
from .covariance import (
    CovarianceSpec,
    extract_params,
    initialize_params,
    materialize,
    materialize_with_derivatives,
    subset,
)
from .errors import (
    CalibrationError,
    CapacityError,
    ConvergenceError,
    DataError,
    DecompositionError,
    MmrmError,
    RankError,
    ShapeError,
    StateError,
    StudyError,
)
from .inference import EffectEstimate, sandwich_vcov, satterthwaite_df, treatment_effect
from .power_plan import (
    PowerInputs,
    co_primary_sample_size,
    min_sample_size,
    power_at,
    power_curve,
    procova_standard_error,
    reduction_fraction,
)
from .reml_engine import FitResult, fit_mmrm, gls_solve, reml_neg2loglik
from .simulation import (
    SCENARIO_KINDS,
    JointCovariance,
    MethodOutcome,
    MethodSummary,
    PsdOrderingReport,
    ReplicateResult,
    ScenarioConfig,
    SimulationReport,
    SubsampleStudyResult,
    build_joint_covariance,
    ess,
    generate_trial,
    normalize_kind,
    psd_ordering_check,
    run_study,
    subsample_variance_study,
    taylor_n0,
    true_effect,
)
from .trial_data import (
    DEFAULT_LADDER,
    DesignMatrices,
    ModelSpec,
    ParticipantRecord,
    TrialDataset,
    VisitSchedule,
    build_design,
    load_dataset,
    score_outcome_correlation,
    stack_outcomes,
    subsample_participants,
)

__all__ = [
    "__version__",
    "CovarianceSpec", "extract_params", "initialize_params", "materialize",
    "materialize_with_derivatives", "subset",
    "MmrmError", "DataError", "ShapeError", "DecompositionError", "RankError",
    "ConvergenceError", "StateError", "CalibrationError", "StudyError",
    "CapacityError",
    "EffectEstimate", "sandwich_vcov", "satterthwaite_df", "treatment_effect",
    "PowerInputs", "procova_standard_error", "power_at", "power_curve",
    "min_sample_size", "co_primary_sample_size", "reduction_fraction",
    "FitResult", "fit_mmrm", "gls_solve", "reml_neg2loglik",
    "SCENARIO_KINDS", "normalize_kind", "ScenarioConfig", "JointCovariance",
    "ReplicateResult", "MethodOutcome", "MethodSummary",
    "SimulationReport", "SubsampleStudyResult", "PsdOrderingReport",
    "build_joint_covariance", "generate_trial", "true_effect", "run_study",
    "subsample_variance_study", "ess", "taylor_n0", "psd_ordering_check",
    "VisitSchedule", "ParticipantRecord", "TrialDataset", "ModelSpec",
    "DesignMatrices", "DEFAULT_LADDER", "build_design", "stack_outcomes",
    "load_dataset", "score_outcome_correlation", "subsample_participants",
]

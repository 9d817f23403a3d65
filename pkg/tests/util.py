"""Small dataset builders shared across test modules."""

import numpy as np

from prognostic_mmrm import ParticipantRecord, TrialDataset, VisitSchedule


def record(pid, arm, outcomes, scores=None, covariates=()):
    outcomes = np.asarray(outcomes, dtype=float)
    if scores is None:
        scores = np.zeros_like(outcomes)
    return ParticipantRecord(id=pid, arm=arm, outcomes=outcomes,
                             prognostic_scores=np.asarray(scores, dtype=float),
                             baseline_covariates=np.asarray(covariates, dtype=float))


def dataset(records, t, covariate_names=()):
    return TrialDataset(schedule=VisitSchedule.of_count(t),
                        participants=tuple(records),
                        covariate_names=tuple(covariate_names))


def random_dataset(rng, n, t, missing="monotone", score_corr=0.6, n_covariates=0):
    """A small synthetic trial with correlated scores and optional dropout.

    Outcomes follow an exchangeable-correlation normal around a visit trend
    plus a score signal; with ``missing="monotone"`` participants drop out
    uniformly (always keeping visit 1), with ``missing="none"`` everyone
    completes. Arms alternate so both are always present.
    """
    corr = 0.4 * np.ones((t, t)) + 0.6 * np.eye(t)
    chol = np.linalg.cholesky(corr)
    records = []
    for i in range(n):
        arm = i % 2
        scores = rng.normal(0.0, 1.0, size=t)
        noise = chol @ rng.normal(0.0, 1.0, size=t)
        trend = 0.3 * np.arange(t)
        outcomes = trend + score_corr * scores + noise + 0.5 * arm
        if missing == "monotone" and t > 1:
            last = int(rng.integers(0, t))  # 0-based last observed visit
            outcomes = outcomes.copy()
            outcomes[last + 1:] = np.nan
        covs = rng.normal(0.0, 1.0, size=n_covariates)
        records.append(record(f"s{i + 1:03d}", arm, outcomes, scores, covs))
    names = tuple(f"c{k + 1}" for k in range(n_covariates))
    return dataset(records, t, names)

"""Longitudinal trial data: ingestion, validation, and design construction.

The working model regresses each observed outcome on per-visit intercepts,
treatment-by-visit indicators, optionally the time-matched prognostic score at
that visit, and optionally baseline covariates interacted with visit. A
participant's design matrix keeps one row per observed outcome and always the
full complement of columns, so that coefficients stay comparable across
participants with different missingness patterns.

Input convention is long format: one row per participant-visit with columns
``id, visit, arm, outcome, score[, cov_1..cov_K]``, 1-based visit numbers, and
an empty outcome cell meaning "missing". Prognostic scores are derived from
baseline data alone, so a score that is absent at one visit but present at a
later one cannot occur in well-formed input and is rejected.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .covariance import KINDS
from .errors import DataError

DEFAULT_LADDER = ("unstructured", "toeplitz", "compound_symmetry")

_REQUIRED_COLUMNS = ("id", "visit", "arm", "outcome", "score")


@dataclass(frozen=True)
class VisitSchedule:
    """The fixed visit grid: a count T and one label per visit."""

    visit_count: int
    visit_labels: tuple[str, ...]

    def __post_init__(self):
        if self.visit_count < 1:
            raise ValueError("schedule needs at least one visit")
        object.__setattr__(self, "visit_labels", tuple(self.visit_labels))
        if len(self.visit_labels) != self.visit_count:
            raise ValueError("label count does not match visit count")
        if len(set(self.visit_labels)) != self.visit_count:
            raise ValueError("visit labels must be unique")

    @classmethod
    def of_count(cls, visit_count: int) -> "VisitSchedule":
        labels = tuple(f"visit {t}" for t in range(1, visit_count + 1))
        return cls(visit_count, labels)


@dataclass(frozen=True, eq=False)
class ParticipantRecord:
    """One participant: arm, per-visit outcomes and scores, baseline covariates.

    ``outcomes`` and ``prognostic_scores`` have one entry per scheduled visit;
    NaN marks a missing outcome. Scores must be present at every visit up to
    and including the last observed outcome (they are baseline-derived, so a
    mid-schedule gap indicates malformed input); entries after the last
    observed outcome may be NaN when the source data omits them.
    """

    id: str
    arm: int
    outcomes: np.ndarray
    prognostic_scores: np.ndarray
    baseline_covariates: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        for name in ("outcomes", "prognostic_scores", "baseline_covariates"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.arm not in (0, 1):
            raise DataError(f"participant {self.id!r}: arm must be 0 or 1, got {self.arm}")
        if self.outcomes.shape != self.prognostic_scores.shape or self.outcomes.ndim != 1:
            raise DataError(f"participant {self.id!r}: outcome/score length mismatch")
        mask = np.isfinite(self.outcomes)
        if not mask.any():
            raise DataError(f"participant {self.id!r}: no observed outcomes")
        last = int(np.max(np.nonzero(mask)[0]))
        if not np.all(np.isfinite(self.prognostic_scores[: last + 1])):
            raise DataError(
                f"participant {self.id!r}: non-baseline-derived score pattern "
                "(prognostic score missing at or before an observed visit)"
            )
        if not np.all(np.isfinite(self.baseline_covariates)):
            raise DataError(f"participant {self.id!r}: non-finite baseline covariate")

    @property
    def observed_mask(self) -> np.ndarray:
        return np.isfinite(self.outcomes)

    @property
    def last_visit(self) -> int:
        """1-based index of the last observed outcome (the participant's T_i)."""
        return int(np.max(np.nonzero(self.observed_mask)[0])) + 1

    @property
    def is_monotone(self) -> bool:
        mask = self.observed_mask
        return bool(mask[: self.last_visit].all())


@dataclass(frozen=True, eq=False)
class TrialDataset:
    schedule: VisitSchedule
    participants: tuple[ParticipantRecord, ...]
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "participants", tuple(self.participants))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        t = self.schedule.visit_count
        k = len(self.covariate_names)
        arms = set()
        for rec in self.participants:
            if len(rec.outcomes) != t:
                raise DataError(f"participant {rec.id!r}: expected {t} visits")
            if len(rec.baseline_covariates) != k:
                raise DataError(f"participant {rec.id!r}: expected {k} baseline covariates")
            arms.add(rec.arm)
        if arms != {0, 1}:
            raise DataError("dataset needs at least one participant in each arm")

    @property
    def n_participants(self) -> int:
        return len(self.participants)

    def arm_indices(self, arm: int) -> np.ndarray:
        return np.array([i for i, rec in enumerate(self.participants) if rec.arm == arm])


@dataclass(frozen=True)
class ModelSpec:
    """Analysis options: which adjustments to include and the structure ladder."""

    adjust_prognostic: bool = True
    adjust_baseline: tuple[int, ...] = ()
    covariance_ladder: tuple[str, ...] = DEFAULT_LADDER

    def __post_init__(self):
        object.__setattr__(self, "adjust_baseline", tuple(self.adjust_baseline))
        object.__setattr__(self, "covariance_ladder", tuple(self.covariance_ladder))
        if not self.covariance_ladder:
            raise ValueError("covariance ladder must name at least one structure")
        for kind in self.covariance_ladder:
            if kind not in KINDS:
                raise ValueError(f"unknown covariance kind {kind!r} in ladder")
        if len(set(self.adjust_baseline)) != len(self.adjust_baseline):
            raise ValueError("duplicate baseline covariate index")
        if any(ix < 0 for ix in self.adjust_baseline):
            raise ValueError("baseline covariate indices must be non-negative")


@dataclass(frozen=True, eq=False)
class DesignMatrices:
    """Per-participant design matrices plus the shared column metadata."""

    matrices: tuple[np.ndarray, ...]
    observed_visit_indices: tuple[np.ndarray, ...]
    column_labels: tuple[str, ...]
    n_visits: int

    @property
    def n_columns(self) -> int:
        return len(self.column_labels)

    @property
    def n_observations(self) -> int:
        return sum(len(obs) for obs in self.observed_visit_indices)

    def treatment_column(self, visit: int) -> int:
        """Column of the treatment-by-visit coefficient for 0-based ``visit``."""
        if not 0 <= visit < self.n_visits:
            raise IndexError(f"visit {visit} outside 0..{self.n_visits - 1}")
        return self.n_visits + visit


def build_design(data: TrialDataset, spec: ModelSpec) -> DesignMatrices:
    """Construct one design matrix per participant under ``spec``.

    Column blocks, in order: per-visit intercepts, treatment x visit,
    prognostic score x visit (when adjusted), then each adjusted baseline
    covariate x visit. Missing visits drop rows, never columns.
    """
    t = data.schedule.visit_count
    k_names = data.covariate_names
    for ix in spec.adjust_baseline:
        if ix >= len(k_names):
            raise ValueError(
                f"baseline covariate index {ix} out of range; dataset has {len(k_names)}"
            )
    labels = [f"time[{lab}]" for lab in data.schedule.visit_labels]
    labels += [f"treat:time[{lab}]" for lab in data.schedule.visit_labels]
    if spec.adjust_prognostic:
        labels += [f"score:time[{lab}]" for lab in data.schedule.visit_labels]
    for ix in spec.adjust_baseline:
        labels += [f"{k_names[ix]}:time[{lab}]" for lab in data.schedule.visit_labels]

    eye = np.eye(t)
    matrices = []
    observed = []
    for rec in data.participants:
        obs = np.nonzero(rec.observed_mask)[0]
        time_rows = eye[obs]
        blocks = [time_rows, rec.arm * time_rows]
        if spec.adjust_prognostic:
            blocks.append(time_rows * rec.prognostic_scores[obs][:, None])
        for ix in spec.adjust_baseline:
            blocks.append(rec.baseline_covariates[ix] * time_rows)
        x = np.hstack(blocks)
        x.setflags(write=False)
        obs.setflags(write=False)
        matrices.append(x)
        observed.append(obs)
    return DesignMatrices(tuple(matrices), tuple(observed), tuple(labels), t)


def stack_outcomes(data: TrialDataset, design: DesignMatrices) -> np.ndarray:
    """Observed outcomes stacked in participant order, aligned with the design rows."""
    return np.concatenate(
        [rec.outcomes[obs] for rec, obs in zip(data.participants, design.observed_visit_indices)]
    )


def score_outcome_correlation(data: TrialDataset, visit: int, arm_filter: int | None = None) -> float:
    """Pearson correlation between scores and outcomes at a 0-based visit.

    Uses the complete pairs at that visit, optionally restricted to one arm.

    Raises:
        DataError: fewer than 3 complete pairs, or zero variance on either side.
    """
    t = data.schedule.visit_count
    if not 0 <= visit < t:
        raise IndexError(f"visit {visit} outside 0..{t - 1}")
    xs, ys = [], []
    for rec in data.participants:
        if arm_filter is not None and rec.arm != arm_filter:
            continue
        if np.isfinite(rec.outcomes[visit]) and np.isfinite(rec.prognostic_scores[visit]):
            xs.append(rec.prognostic_scores[visit])
            ys.append(rec.outcomes[visit])
    if len(xs) < 3:
        raise DataError(
            f"visit {visit}: need at least 3 complete score/outcome pairs, have {len(xs)}"
        )
    x = np.array(xs) - np.mean(xs)
    y = np.array(ys) - np.mean(ys)
    sxx = float(x @ x)
    syy = float(y @ y)
    if sxx <= 0.0 or syy <= 0.0:
        raise DataError(f"visit {visit}: zero variance in scores or outcomes")
    return float((x @ y) / math.sqrt(sxx * syy))


def subsample_participants(data: TrialDataset, fraction: float, seed: int) -> TrialDataset:
    """Randomly retain ``floor(fraction * n_arm + 0.5)`` participants per arm.

    Sampling is without replacement, independent per arm, and deterministic
    for a given seed; retained records keep their original order and contents.

    Raises:
        ValueError: fraction outside (0, 1] or a resulting arm smaller than 2.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    keep: set[int] = set()
    for arm in (0, 1):
        members = data.arm_indices(arm)
        n_keep = int(math.floor(fraction * len(members) + 0.5))
        if n_keep < 2:
            raise ValueError(
                f"fraction {fraction} leaves arm {arm} with {n_keep} participants (< 2)"
            )
        chosen = rng.choice(len(members), size=n_keep, replace=False)
        keep.update(int(members[c]) for c in chosen)
    retained = tuple(rec for i, rec in enumerate(data.participants) if i in keep)
    return TrialDataset(data.schedule, retained, data.covariate_names)


# ---------------------------------------------------------------------------
# Long-format CSV ingestion
# ---------------------------------------------------------------------------

def load_dataset(source, schema: dict | None = None) -> TrialDataset:
    """Read a long-format CSV file into a :class:`TrialDataset`.

    Args:
        source: path to the CSV file (or any object ``open`` accepts).
        schema: optional column mapping with keys ``id``, ``visit``, ``arm``,
            ``outcome``, ``score``, and optionally ``covariates`` (a list of
            column names). Defaults to those literal names, with every
            remaining column treated as a baseline covariate.

    Raises:
        DataError: malformed rows (reported with their line number), duplicate
            (id, visit) pairs, bad arm codes, or score patterns that cannot
            come from baseline-derived scores.
    """
    schema = dict(schema or {})
    colmap = {key: schema.get(key, key) for key in _REQUIRED_COLUMNS}

    with open(source, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty input file") from None
        header = [h.strip() for h in header]
        positions = {}
        for key, col in colmap.items():
            if col not in header:
                raise DataError(f"missing required column {col!r}")
            positions[key] = header.index(col)
        if "covariates" in schema:
            cov_cols = list(schema["covariates"])
            for col in cov_cols:
                if col not in header:
                    raise DataError(f"missing covariate column {col!r}")
        else:
            used = set(positions.values())
            cov_cols = [h for i, h in enumerate(header) if i not in used]
        cov_positions = [header.index(c) for c in cov_cols]

        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataError(f"row {line_no}: expected {len(header)} fields, got {len(row)}")
            rows.append((line_no, row))

    if not rows:
        raise DataError("input file contains no data rows")

    def parse_num(cell: str, line_no: int, what: str, allow_empty: bool) -> float:
        cell = cell.strip()
        if cell == "":
            if allow_empty:
                return math.nan
            raise DataError(f"row {line_no}: empty {what} cell")
        try:
            return float(cell)
        except ValueError:
            raise DataError(f"row {line_no}: malformed {what} value {cell!r}") from None

    max_visit = 0
    per_id: dict[str, dict] = {}
    id_order: list[str] = []
    for line_no, row in rows:
        pid = row[positions["id"]].strip()
        if not pid:
            raise DataError(f"row {line_no}: empty id")
        visit_cell = row[positions["visit"]].strip()
        try:
            visit = int(visit_cell)
        except ValueError:
            raise DataError(f"row {line_no}: malformed visit value {visit_cell!r}") from None
        if visit < 1:
            raise DataError(f"row {line_no}: visit numbers are 1-based, got {visit}")
        max_visit = max(max_visit, visit)
        arm_cell = row[positions["arm"]].strip()
        if arm_cell not in ("0", "1"):
            raise DataError(f"row {line_no}: arm must be 0 or 1, got {arm_cell!r}")
        arm = int(arm_cell)
        outcome = parse_num(row[positions["outcome"]], line_no, "outcome", allow_empty=True)
        score = parse_num(row[positions["score"]], line_no, "score", allow_empty=True)
        covs = [parse_num(row[j], line_no, f"covariate {header[j]!r}", allow_empty=False)
                for j in cov_positions]

        if pid not in per_id:
            per_id[pid] = {"arm": arm, "covs": covs, "visits": {}}
            id_order.append(pid)
        entry = per_id[pid]
        if entry["arm"] != arm:
            raise DataError(f"row {line_no}: participant {pid!r} changes arm")
        if entry["covs"] != covs:
            raise DataError(f"row {line_no}: participant {pid!r} changes baseline covariates")
        if visit in entry["visits"]:
            raise DataError(f"row {line_no}: duplicate entry for participant {pid!r} visit {visit}")
        entry["visits"][visit] = (outcome, score, line_no)

    schedule = VisitSchedule.of_count(max_visit)
    records = []
    for pid in id_order:
        entry = per_id[pid]
        outcomes = np.full(max_visit, math.nan)
        scores = np.full(max_visit, math.nan)
        for visit, (outcome, score, _line) in entry["visits"].items():
            outcomes[visit - 1] = outcome
            scores[visit - 1] = score
        score_mask = np.isfinite(scores)
        if score_mask.any():
            last_score = int(np.max(np.nonzero(score_mask)[0]))
            if not score_mask[: last_score + 1].all():
                raise DataError(
                    f"participant {pid!r}: non-baseline-derived score pattern "
                    "(intermittent prognostic-score gap)"
                )
        if not np.isfinite(outcomes).any():
            raise DataError(f"participant {pid!r}: no observed outcomes")
        records.append(
            ParticipantRecord(
                id=pid,
                arm=entry["arm"],
                outcomes=outcomes,
                prognostic_scores=scores,
                baseline_covariates=np.array(entry["covs"], dtype=float),
            )
        )
    return TrialDataset(schedule, tuple(records), tuple(cov_cols))

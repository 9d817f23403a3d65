"""Exception types shared across the package.

Plain ``ValueError`` is used for simple argument-range violations; the classes
here mark failures that callers may want to catch and handle individually
(data problems, numerical breakdowns, convergence exhaustion).
"""

from __future__ import annotations


class MmrmError(Exception):
    """Base class for all package-specific errors."""


class DataError(MmrmError, ValueError):
    """Malformed or inconsistent input data (messages carry row context)."""


class ShapeError(MmrmError, ValueError):
    """Dimension or parameter-length mismatch."""


class DecompositionError(MmrmError):
    """A matrix that must be positive definite failed factorization."""


class RankError(MmrmError):
    """Singular design or information matrix.

    Attributes:
        aliased: labels of the columns implicated in the rank deficiency.
    """

    def __init__(self, message: str, aliased: tuple[str, ...] = ()):
        super().__init__(message)
        self.aliased = tuple(aliased)


class ConvergenceError(MmrmError):
    """Every covariance structure in the ladder failed to converge.

    Attributes:
        attempts: one (structure kind, reason) pair per ladder entry tried.
    """

    def __init__(self, message: str, attempts: tuple[tuple[str, str], ...] = ()):
        super().__init__(message)
        self.attempts = tuple(attempts)


class StateError(MmrmError):
    """Operation requested on a fit that is not in a usable state."""


class CalibrationError(MmrmError):
    """A simulation calibration (dropout intercept, covariance scale) failed."""


class StudyError(MmrmError):
    """A Monte Carlo study exceeded its replicate-failure budget."""


class CapacityError(MmrmError):
    """A search exceeded its hard bounds (e.g. unreachable target power)."""

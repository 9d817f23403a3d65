"""Power and sample-size planning under prognostic covariate adjustment.

The planning formulas are the equal-allocation closed forms: with total
pre-dropout sample size ``n``, dropout proportion ``d``, outcome standard
deviation ``sigma``, validated score-outcome correlation ``r``, and the
conservatism factors ``gamma`` (standard-deviation inflation, >= 1) and
``lam`` (correlation deflation, in [0, 1]), the treatment-effect standard
error is

    nu = sqrt( (2*gamma*sigma)^2 * (1 - (lam*r)^2) / (n*(1-d)) )

and the two-sided power at effect ``beta_target`` is

    Phi(Phi^-1(alpha/2) + beta_target/nu) + Phi(Phi^-1(alpha/2) - beta_target/nu).

Setting ``lam`` to zero removes the adjustment entirely and recovers the
classical unadjusted two-sample arithmetic. The defaults ``lam = 1`` and
``gamma = 1`` take the validated correlation at face value; real planning
exercises normally deflate/inflate these, so choose them deliberately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from scipy.special import ndtr, ndtri

from .errors import CapacityError

_MAX_N = 1_000_000_000


@dataclass(frozen=True)
class PowerInputs:
    """Inputs to the planning formulas.

    Attributes:
        n: candidate total sample size before dropout (both arms, 1:1 split).
            May be None for operations that search over n.
        d: dropout proportion in [0, 1).
        gamma: standard-deviation inflation factor, >= 1.
        sigma: outcome standard deviation, > 0.
        lam: correlation deflation factor in [0, 1].
        r: validated score-outcome Pearson correlation in [-1, 1].
        alpha: two-sided type I rate in (0, 1).
        beta_target: target treatment effect in outcome units.
    """

    n: int | None
    d: float
    gamma: float
    sigma: float
    lam: float
    r: float
    alpha: float = 0.05
    beta_target: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.d < 1.0:
            raise ValueError(f"dropout proportion d must lie in [0, 1), got {self.d}")
        if not self.gamma >= 1.0:
            raise ValueError(f"inflation factor gamma must be >= 1, got {self.gamma}")
        if not self.sigma > 0.0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"deflation factor lam must lie in [0, 1], got {self.lam}")
        if not -1.0 <= self.r <= 1.0:
            raise ValueError(f"correlation r must lie in [-1, 1], got {self.r}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not math.isfinite(self.beta_target):
            raise ValueError("beta_target must be finite")
        if self.n is not None:
            if self.n != int(self.n):
                raise ValueError(f"n must be an integer, got {self.n}")
            if self.n * (1.0 - self.d) < 2.0:
                raise ValueError(
                    f"effective sample size n*(1-d) must be >= 2, got {self.n * (1.0 - self.d)}"
                )


def procova_standard_error(inputs: PowerInputs) -> float:
    """Planned standard error nu of the adjusted treatment-effect estimate."""
    if inputs.n is None:
        raise ValueError("procova_standard_error needs a concrete n")
    shrink = 1.0 - (inputs.lam * inputs.r) ** 2
    return math.sqrt((2.0 * inputs.gamma * inputs.sigma) ** 2 * shrink
                     / (inputs.n * (1.0 - inputs.d)))


def power_at(nu: float, beta_target: float, alpha: float) -> float:
    """Two-sided power of the level-alpha test at standard error nu.

    Raises:
        ValueError: nu <= 0 or alpha outside (0, 1).
    """
    if not nu > 0.0:
        raise ValueError(f"standard error nu must be positive, got {nu}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    z = ndtri(alpha / 2.0)
    shift = beta_target / nu
    return float(ndtr(z + shift) + ndtr(z - shift))


def _power_of_n(inputs: PowerInputs, n: int) -> float:
    return power_at(procova_standard_error(replace(inputs, n=n)),
                    inputs.beta_target, inputs.alpha)


def power_curve(inputs: PowerInputs, n_range: tuple[int, int], step: int = 1):
    """Power at each n in the inclusive range, as ordered (n, power) pairs.

    Raises:
        ValueError: empty range or nonpositive step.
    """
    lo, hi = int(n_range[0]), int(n_range[1])
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    if hi < lo:
        raise ValueError(f"empty sample-size range ({lo}, {hi})")
    return [(n, _power_of_n(inputs, n)) for n in range(lo, hi + 1, step)]


def min_sample_size(inputs: PowerInputs, target_power: float) -> int:
    """Smallest even total n whose planned power reaches the target.

    ``inputs.n`` is ignored. The search brackets by doubling, bisects on even
    candidates, then scans locally to certify minimality.

    Raises:
        ValueError: target_power outside (alpha, 1).
        CapacityError: the target is unreachable within n = 10^9.
    """
    if not inputs.alpha < target_power < 1.0:
        raise ValueError(
            f"target power must lie in (alpha, 1) = ({inputs.alpha}, 1), got {target_power}"
        )

    def even_ceil(x: float) -> int:
        k = math.ceil(x)
        return k if k % 2 == 0 else k + 1

    lo = max(even_ceil(2.0 / (1.0 - inputs.d)), 2)
    if _power_of_n(inputs, lo) >= target_power:
        return lo
    hi = lo
    while _power_of_n(inputs, hi) < target_power:
        hi *= 2
        if hi > _MAX_N:
            raise CapacityError(
                f"target power {target_power} unreachable within n <= {_MAX_N}"
            )
    while hi - lo > 2:
        mid = (lo + hi) // 2
        mid -= mid % 2
        if _power_of_n(inputs, mid) >= target_power:
            hi = mid
        else:
            lo = mid
    while hi - 2 >= 2 and hi - 2 >= lo and _power_of_n(inputs, hi - 2) >= target_power:
        hi -= 2
    return hi


def co_primary_sample_size(endpoint_inputs, target_power: float) -> int:
    """Planning n for co-primary endpoints: the max of per-endpoint minima."""
    endpoint_inputs = list(endpoint_inputs)
    if not endpoint_inputs:
        raise ValueError("need at least one endpoint")
    return max(min_sample_size(inp, target_power) for inp in endpoint_inputs)


def reduction_fraction(lam: float, r: float) -> float:
    """Fractional sample-size reduction (lam*r)^2 at fixed power.

    Raises:
        ValueError: lam outside [0, 1] or |r| > 1.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"deflation factor lam must lie in [0, 1], got {lam}")
    if not -1.0 <= r <= 1.0:
        raise ValueError(f"correlation r must lie in [-1, 1], got {r}")
    return (lam * r) ** 2

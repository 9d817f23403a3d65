"""Residual covariance structures for repeated-measures models.

Three structures are supported, each with an unconstrained parameter vector
``phi`` chosen so that every finite ``phi`` maps to a symmetric positive
definite matrix:

* ``unstructured`` — log-Cholesky: ``psi = L @ L.T`` with ``L`` lower
  triangular and ``exp(phi)`` on the diagonal. T(T+1)/2 parameters.
* ``toeplitz`` — homogeneous variance ``exp(2*phi[0])`` and banded
  correlations built from partial autocorrelations ``tanh(phi[1:])`` through
  the Durbin-Levinson recursion. T parameters.
* ``compound_symmetry`` — variance ``exp(2*phi[0])`` and a common correlation
  obtained by mapping ``tanh(phi[1])`` into the feasible interval
  ``(-1/(T-1), 1)``. 2 parameters.

``materialize_with_derivatives`` additionally returns d(psi)/d(phi_k) for each
parameter, which the fitting engine needs for analytic likelihood gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import toeplitz as _toeplitz

from .errors import DecompositionError, RankError, ShapeError

KINDS = ("unstructured", "toeplitz", "compound_symmetry")

_PACF_LIMIT = 1.0 - 1e-10
_CORR_LIMIT = 1.0 - 1e-10


@dataclass(frozen=True)
class CovarianceSpec:
    """A covariance structure kind together with its dimension.

    Attributes:
        kind: one of ``"unstructured"``, ``"toeplitz"``, ``"compound_symmetry"``.
        dim: number of scheduled visits T (matrix is dim x dim).
    """

    kind: str
    dim: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown covariance kind {self.kind!r}; expected one of {KINDS}")
        if self.dim < 1:
            raise ValueError(f"dimension must be >= 1, got {self.dim}")

    @property
    def param_count(self) -> int:
        if self.kind == "unstructured":
            return self.dim * (self.dim + 1) // 2
        if self.kind == "toeplitz":
            return self.dim
        return 2


def _check_phi(spec: CovarianceSpec, phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (spec.param_count,):
        raise ShapeError(
            f"{spec.kind} with dim {spec.dim} takes {spec.param_count} parameters, "
            f"got shape {phi.shape}"
        )
    if not np.all(np.isfinite(phi)):
        raise ValueError("parameter vector contains non-finite entries")
    return phi


def _cs_feasible_low(dim: int) -> float:
    # Lower end of the PD interval for a common correlation. Vacuous at T=1.
    return -1.0 / (dim - 1) if dim > 1 else -1.0


def _pacf_to_acf(pacf: np.ndarray, want_jacobian: bool = False):
    """Map partial autocorrelations in (-1, 1) to autocorrelations.

    Runs the Durbin-Levinson recursion: with order-k AR coefficients a_k built
    from the partials, rho_k = sum_j a_k[j] * rho_{k-1-j} (rho_0 = 1). Any
    pacf vector with entries in (-1, 1) yields an autocorrelation sequence
    whose symmetric Toeplitz matrix is positive definite.

    Returns ``rho`` (and, when requested, the Jacobian d rho / d pacf).
    """
    lags = len(pacf)
    rho = np.zeros(lags)
    jac = np.zeros((lags, lags)) if want_jacobian else None
    a = np.zeros(lags)          # current AR coefficients a[0..k]
    da = np.zeros((lags, lags)) if want_jacobian else None

    for k in range(lags):
        pk = pacf[k]
        if k == 0:
            a[0] = pk
            rho[0] = pk
            if want_jacobian:
                da[0, 0] = 1.0
                jac[0, 0] = 1.0
            continue
        prev = a[:k].copy()
        a[:k] = prev - pk * prev[::-1]
        a[k] = pk
        if want_jacobian:
            dprev = da[:k].copy()
            da[:k] = dprev - pk * dprev[::-1]
            da[:k, k] -= prev[::-1]
            da[k] = 0.0
            da[k, k] = 1.0
        # rho_k = a . (rho_{k-1}, ..., rho_0)
        past = np.concatenate((rho[:k][::-1], [1.0]))
        rho[k] = a[: k + 1] @ past
        if want_jacobian:
            dpast = np.vstack((jac[:k][::-1], np.zeros(lags)))
            jac[k] = da[: k + 1].T @ past + a[: k + 1] @ dpast
    return (rho, jac) if want_jacobian else rho


def _acf_to_pacf(rho: np.ndarray) -> np.ndarray:
    """Invert :func:`_pacf_to_acf` (Levinson recursion), clamping to (-1, 1)."""
    lags = len(rho)
    pacf = np.zeros(lags)
    a = np.zeros(lags)
    for k in range(lags):
        if k == 0:
            pk = rho[0]
        else:
            num = rho[k] - a[:k] @ rho[:k][::-1]
            den = 1.0 - a[:k] @ rho[:k]
            pk = num / den if den > 1e-12 else 0.0
        pk = float(np.clip(pk, -_PACF_LIMIT, _PACF_LIMIT))
        pacf[k] = pk
        prev = a[:k].copy()
        a[:k] = prev - pk * prev[::-1]
        a[k] = pk
    return pacf


def materialize(spec: CovarianceSpec, phi: np.ndarray) -> np.ndarray:
    """Build the T x T covariance matrix for unconstrained parameters ``phi``.

    Raises:
        ShapeError: if ``phi`` has the wrong length for ``spec``.
        ValueError: on non-finite parameters or non-finite output.
    """
    psi, _ = _materialize_impl(spec, _check_phi(spec, phi), want_derivs=False)
    if not np.all(np.isfinite(psi)):
        raise ValueError("covariance materialization produced non-finite entries")
    return psi


def materialize_with_derivatives(spec: CovarianceSpec, phi: np.ndarray):
    """Return ``(psi, dpsi)`` with ``dpsi[k] = d psi / d phi[k]``."""
    phi = _check_phi(spec, phi)
    psi, dpsi = _materialize_impl(spec, phi, want_derivs=True)
    return psi, dpsi


def _materialize_impl(spec: CovarianceSpec, phi: np.ndarray, want_derivs: bool):
    dim = spec.dim

    if spec.kind == "unstructured":
        rows, cols = np.tril_indices(dim)
        chol = np.zeros((dim, dim))
        vals = phi.copy()
        diag = rows == cols
        vals[diag] = np.exp(phi[diag])
        chol[rows, cols] = vals
        psi = chol @ chol.T
        if not want_derivs:
            return psi, None
        dpsi = np.empty((len(phi), dim, dim))
        for k, (r, c) in enumerate(zip(rows, cols)):
            dchol = np.zeros((dim, dim))
            dchol[r, c] = chol[r, c] if r == c else 1.0
            block = dchol @ chol.T
            dpsi[k] = block + block.T
        return psi, dpsi

    if spec.kind == "compound_symmetry":
        var = np.exp(2.0 * phi[0])
        low = _cs_feasible_low(dim)
        t = np.tanh(phi[1])
        rho = low + (1.0 - low) * (t + 1.0) / 2.0
        corr = np.full((dim, dim), rho)
        np.fill_diagonal(corr, 1.0)
        psi = var * corr
        if not want_derivs:
            return psi, None
        dpsi = np.empty((2, dim, dim))
        dpsi[0] = 2.0 * psi
        drho = (1.0 - low) * (1.0 - t * t) / 2.0
        offdiag = var * drho * (np.ones((dim, dim)) - np.eye(dim))
        dpsi[1] = offdiag if dim > 1 else np.zeros((1, 1))
        return psi, dpsi

    # toeplitz
    var = np.exp(2.0 * phi[0])
    pacf = np.tanh(phi[1:])
    if dim == 1:
        psi = np.array([[var]])
        if not want_derivs:
            return psi, None
        return psi, 2.0 * psi[None, :, :]
    if want_derivs:
        rho, jac = _pacf_to_acf(pacf, want_jacobian=True)
    else:
        rho = _pacf_to_acf(pacf)
    first_col = np.concatenate(([1.0], rho))
    corr = _toeplitz(first_col)
    psi = var * corr
    if not want_derivs:
        return psi, None
    dpsi = np.empty((dim, dim, dim))
    dpsi[0] = 2.0 * psi
    dtanh = 1.0 - pacf * pacf
    for m in range(dim - 1):
        dcol = np.concatenate(([0.0], jac[:, m]))
        dpsi[m + 1] = var * _toeplitz(dcol) * dtanh[m]
    return psi, dpsi


def extract_params(spec: CovarianceSpec, psi: np.ndarray) -> np.ndarray:
    """Recover a parameter vector whose materialization approximates ``psi``.

    Exact (round trip to 1e-10) for the unstructured kind; a least-squares
    projection onto the structure for the other kinds.

    Raises:
        DecompositionError: if ``psi`` is not positive definite.
    """
    psi = np.asarray(psi, dtype=float)
    dim = spec.dim
    if psi.shape != (dim, dim):
        raise ShapeError(f"expected a {dim}x{dim} matrix, got shape {psi.shape}")
    try:
        chol = np.linalg.cholesky(psi)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError("covariance matrix is not positive definite") from exc

    if spec.kind == "unstructured":
        rows, cols = np.tril_indices(dim)
        phi = chol[rows, cols]
        diag = rows == cols
        phi[diag] = np.log(chol[rows[diag], cols[diag]])
        return phi

    var = float(np.mean(np.diag(psi)))
    log_sd = 0.5 * np.log(var)

    if spec.kind == "compound_symmetry":
        if dim == 1:
            return np.array([log_sd, 0.0])
        off = psi[~np.eye(dim, dtype=bool)]
        rho = float(np.mean(off)) / var
        low = _cs_feasible_low(dim)
        u = 2.0 * (rho - low) / (1.0 - low) - 1.0
        u = float(np.clip(u, -_CORR_LIMIT, _CORR_LIMIT))
        return np.array([log_sd, np.arctanh(u)])

    # toeplitz: average each off-diagonal band, then convert to partials
    if dim == 1:
        return np.array([log_sd])
    bands = np.array([np.mean(np.diag(psi, k)) for k in range(1, dim)]) / var
    bands = np.clip(bands, -_CORR_LIMIT, _CORR_LIMIT)
    pacf = _acf_to_pacf(bands)
    return np.concatenate(([log_sd], np.arctanh(pacf)))


def subset(psi: np.ndarray, observed) -> np.ndarray:
    """Principal submatrix of ``psi`` on zero-based visit positions ``observed``.

    The result of restricting a positive definite matrix to a non-empty index
    set is again positive definite (eigenvalue interlacing).

    Raises:
        IndexError: on an empty, duplicated, unsorted, or out-of-range index set.
    """
    psi = np.asarray(psi, dtype=float)
    idx = np.asarray(observed, dtype=int)
    dim = psi.shape[0]
    if idx.size == 0:
        raise IndexError("observed index set is empty")
    if np.any(idx < 0) or np.any(idx >= dim):
        raise IndexError(f"observed indices must lie in [0, {dim - 1}]")
    if np.any(np.diff(idx) <= 0):
        raise IndexError("observed indices must be strictly increasing")
    return psi[np.ix_(idx, idx)]


def initialize_params(data, design, spec: CovarianceSpec) -> np.ndarray:
    """Starting values from the pairwise-complete covariance of OLS residuals.

    Pools every observed row into one ordinary least-squares fit, scatters the
    residuals back onto the visit grid, and estimates each covariance entry
    from the participants observed at both visits. If the resulting matrix is
    not positive definite its eigenvalues are clipped at
    ``1e-4 * trace / T`` before projection onto ``spec``.

    Raises:
        RankError: if the pooled design is rank deficient.
    """
    dim = spec.dim
    x_all = np.vstack([np.asarray(x) for x in design.matrices])
    y_all = np.concatenate(
        [np.asarray(rec.outcomes)[np.asarray(obs)] for rec, obs in
         zip(data.participants, design.observed_visit_indices)]
    )
    p = x_all.shape[1]
    if np.linalg.matrix_rank(x_all) < p:
        raise RankError(
            "pooled design is rank deficient; cannot form OLS starting values",
            aliased=_aliased_columns(x_all, design.column_labels),
        )
    beta, *_ = np.linalg.lstsq(x_all, y_all, rcond=None)

    sums = np.zeros((dim, dim))
    counts = np.zeros((dim, dim))
    offset = 0
    for obs in design.observed_visit_indices:
        obs = np.asarray(obs)
        k = len(obs)
        resid = y_all[offset:offset + k] - x_all[offset:offset + k] @ beta
        offset += k
        sums[np.ix_(obs, obs)] += np.outer(resid, resid)
        counts[np.ix_(obs, obs)] += 1.0
    with np.errstate(invalid="ignore"):
        pairwise = np.where(counts > 0, sums / np.maximum(counts, 1.0), 0.0)
    pairwise = (pairwise + pairwise.T) / 2.0

    eigvals, eigvecs = np.linalg.eigh(pairwise)
    floor = 1e-4 * max(np.trace(pairwise), 1e-8) / dim
    if eigvals[0] < floor:
        eigvals = np.maximum(eigvals, floor)
        pairwise = (eigvecs * eigvals) @ eigvecs.T
        pairwise = (pairwise + pairwise.T) / 2.0
    return extract_params(spec, pairwise)


def _aliased_columns(x: np.ndarray, labels) -> tuple[str, ...]:
    """Names of columns implicated in a rank deficiency, via pivoted QR."""
    from scipy.linalg import qr

    _, r, piv = qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag.max() * max(x.shape) * np.finfo(float).eps if diag.size else 0.0
    rank = int(np.sum(diag > tol))
    labels = list(labels)
    return tuple(labels[j] for j in sorted(piv[rank:]))

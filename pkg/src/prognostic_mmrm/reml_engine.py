"""Restricted maximum likelihood fitting for repeated-measures models.

The objective is the profiled REML deviance

    F(phi) = sum_i log|R_i| + log|sum_i X_i' R_i^-1 X_i|
             + sum_i r_i' R_i^-1 r_i + (n_obs - p) log 2*pi

with ``R_i`` the structure matrix restricted to participant i's observed
visits and ``r_i`` the GLS residual at the profiled coefficients
``beta(phi)``. Everything is accumulated participant-block by
participant-block; the stacked block-diagonal covariance is never formed.

Participants sharing a missingness pattern also share ``R_i``, so the engine
groups them and precomputes per-pattern cross products

    gxx[s,t] = sum_i X_i[s,:] (x) X_i[t,:],   gxy[s,t] = sum_i X_i[s,:] y_i[t],
    gyy[s,t] = sum_i y_i[s] y_i[t].

Each objective or gradient evaluation is then a handful of small matrix
contractions whose cost does not grow with the number of participants. The
analytic score uses the standard identities

    dF/dphi_k = sum_i tr(R_i^-1 dR_i) - tr(A^-1 B_k) - r' Omega^-1 dOmega Omega^-1 r

with A the accumulated information and B_k its derivative contraction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.linalg import cho_factor, cho_solve

from . import covariance as cov
from .errors import ConvergenceError, DataError, RankError, ShapeError
from .trial_data import DesignMatrices, ModelSpec, TrialDataset, build_design, stack_outcomes

_GRAD_TOL = 1e-6
_MAX_ITER = 200
_LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# Pattern-grouped workspace
# ---------------------------------------------------------------------------

class _Pattern:
    """All participants sharing one observed-visit pattern, plus cross products."""

    __slots__ = ("indices", "x", "y", "members", "count", "gxx", "gxy", "gyy")

    def __init__(self, indices: np.ndarray, x: np.ndarray, y: np.ndarray, members: np.ndarray):
        self.indices = indices
        self.x = x                      # (m, s, p)
        self.y = y                      # (m, s)
        self.members = members
        self.count = x.shape[0]
        m, s, p = x.shape
        flat = x.reshape(m, s * p)
        big = flat.T @ flat             # (s*p, s*p) = sum_i X_i (x) X_i
        self.gxx = np.ascontiguousarray(
            big.reshape(s, p, s, p).transpose(0, 2, 1, 3).reshape(s * s, p * p)
        )
        xy = flat.T @ y                 # (s*p, s)
        self.gxy = np.ascontiguousarray(
            xy.reshape(s, p, s).transpose(0, 2, 1).reshape(s * s, p)
        )
        self.gyy = (y.T @ y).reshape(s * s)

    def contract(self, q: np.ndarray):
        """(X'QX, X'Qy, y'Qy) accumulated over the pattern's participants."""
        s = len(self.indices)
        p = self.x.shape[2]
        qf = np.ascontiguousarray(q).reshape(s * s)
        return (qf @ self.gxx).reshape(p, p), qf @ self.gxy, float(qf @ self.gyy)

    def contract_xqx(self, q: np.ndarray) -> np.ndarray:
        s = len(self.indices)
        p = self.x.shape[2]
        return (np.ascontiguousarray(q).reshape(s * s) @ self.gxx).reshape(p, p)


class _Workspace:
    """Design and outcomes regrouped by missingness pattern."""

    def __init__(self, design: DesignMatrices, outcomes: np.ndarray):
        outcomes = np.asarray(outcomes, dtype=float)
        if outcomes.shape != (design.n_observations,):
            raise ShapeError(
                f"expected {design.n_observations} stacked outcomes, got {outcomes.shape}"
            )
        self.design = design
        self.outcomes = outcomes
        self.p = design.n_columns
        self.n_obs = design.n_observations
        self.n_participants = len(design.matrices)
        self.t = design.n_visits

        groups: dict[tuple[int, ...], list[int]] = {}
        offsets = np.concatenate(([0], np.cumsum([len(o) for o in design.observed_visit_indices])))
        for i, obs in enumerate(design.observed_visit_indices):
            groups.setdefault(tuple(int(v) for v in obs), []).append(i)
        self.patterns: list[_Pattern] = []
        for key in sorted(groups):
            members = np.array(groups[key])
            idx = np.array(key)
            x = np.stack([design.matrices[i] for i in members])
            y = np.stack([outcomes[offsets[i]:offsets[i] + len(key)] for i in members])
            self.patterns.append(_Pattern(idx, x, y, members))

    # -- core accumulations -------------------------------------------------

    def _per_pattern_r(self, psi: np.ndarray):
        """Cholesky-based inverse and log-determinant of each pattern's R."""
        out = []
        for pat in self.patterns:
            r = psi[np.ix_(pat.indices, pat.indices)]
            c, low = cho_factor(r, lower=True, check_finite=False)
            rinv = cho_solve((c, low), np.eye(len(pat.indices)), check_finite=False)
            logdet = 2.0 * float(np.sum(np.log(np.diag(c))))
            out.append((rinv, logdet))
        return out

    def normal_equations(self, psi: np.ndarray):
        """Accumulate (A, b, y'Qy, sum log|R_i|) at the given structure matrix."""
        a = np.zeros((self.p, self.p))
        b = np.zeros(self.p)
        yqy = 0.0
        logdet_r = 0.0
        rinvs = []
        for pat, (rinv, logdet) in zip(self.patterns, self._per_pattern_r(psi)):
            xqx, xqy, yy = pat.contract(rinv)
            a += xqx
            b += xqy
            yqy += yy
            logdet_r += pat.count * logdet
            rinvs.append(rinv)
        return a, b, yqy, logdet_r, rinvs

    def objective_parts(self, psi: np.ndarray):
        a, b, yqy, logdet_r, rinvs = self.normal_equations(psi)
        ca, low = cho_factor(a, lower=True, check_finite=False)
        logdet_a = 2.0 * float(np.sum(np.log(np.diag(ca))))
        beta = cho_solve((ca, low), b, check_finite=False)
        quad = yqy - float(beta @ b)
        value = logdet_r + logdet_a + quad + (self.n_obs - self.p) * _LOG_2PI
        return value, beta, (ca, low), rinvs

    def objective(self, spec: cov.CovarianceSpec, phi: np.ndarray) -> float:
        # optimizers probe extreme parameters; overflow there is routine and
        # already mapped to an infinite objective
        try:
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                psi = cov.materialize(spec, phi)
                if not np.all(np.isfinite(psi)):
                    return np.inf
                value, *_ = self.objective_parts(psi)
        except (np.linalg.LinAlgError, ValueError):
            return np.inf
        return value if np.isfinite(value) else np.inf

    def objective_and_grad(self, spec: cov.CovarianceSpec, phi: np.ndarray):
        q = spec.param_count
        try:
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                psi, dpsi = cov.materialize_with_derivatives(spec, phi)
                value, beta, a_chol, rinvs = self.objective_parts(psi)
        except (np.linalg.LinAlgError, ValueError):
            return np.inf, np.zeros(q)
        if not np.isfinite(value) or not np.all(np.isfinite(psi)):
            return np.inf, np.zeros(q)

        grad = np.zeros(q)
        a_inv = cho_solve(a_chol, np.eye(self.p), check_finite=False)
        for k in range(q):
            dpk = dpsi[k]
            total = 0.0
            b_k = np.zeros((self.p, self.p))
            quad_k = 0.0
            for pat, rinv in zip(self.patterns, rinvs):
                rdot = dpk[np.ix_(pat.indices, pat.indices)]
                ri_rdot = rinv @ rdot
                total += pat.count * float(np.trace(ri_rdot))
                m_k = ri_rdot @ rinv
                xmx, xmy, ymy = pat.contract(m_k)
                b_k += xmx
                quad_k += ymy - 2.0 * float(beta @ xmy) + float(beta @ xmx @ beta)
            grad[k] = total - float(np.sum(a_inv * b_k)) - quad_k
        return value, grad

    def expected_information(self, spec: cov.CovarianceSpec, phi: np.ndarray) -> np.ndarray:
        """Expected (Fisher) REML information for phi: 0.5 tr(P dOmega P dOmega)."""
        psi, dpsi = cov.materialize_with_derivatives(spec, phi)
        a, _, _, _, rinvs = self.normal_equations(psi)
        a_inv = np.linalg.inv(a)
        q = spec.param_count
        per_pattern = []
        for pat, rinv in zip(self.patterns, rinvs):
            rdots = [dpsi[k][np.ix_(pat.indices, pat.indices)] for k in range(q)]
            ri_rdots = [rinv @ rd for rd in rdots]
            per_pattern.append((pat, rinv, ri_rdots))
        b_mats = []
        for k in range(q):
            b_k = np.zeros((self.p, self.p))
            for pat, rinv, ri_rdots in per_pattern:
                b_k += pat.contract_xqx(ri_rdots[k] @ rinv)
            b_mats.append(b_k)
        info = np.zeros((q, q))
        for j in range(q):
            for k in range(j, q):
                t1 = 0.0
                t2 = 0.0
                for pat, rinv, ri_rdots in per_pattern:
                    prod = ri_rdots[j] @ ri_rdots[k]
                    t1 += pat.count * float(np.trace(prod))
                    t2 += float(np.sum(a_inv * pat.contract_xqx(prod @ rinv)))
                t3 = float(np.sum((a_inv @ b_mats[j]) * (a_inv @ b_mats[k]).T))
                info[j, k] = info[k, j] = 0.5 * (t1 - 2.0 * t2 + t3)
        return info

    def contrast_variance(self, spec: cov.CovarianceSpec, phi: np.ndarray, contrast: np.ndarray) -> float:
        """c' A(phi)^-1 c for the model-based coefficient covariance."""
        psi = cov.materialize(spec, phi)
        a, *_ = self.normal_equations(psi)
        ca = cho_factor(a, lower=True, check_finite=False)
        return float(contrast @ cho_solve(ca, contrast, check_finite=False))


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FitResult:
    """A converged REML fit and everything downstream inference needs."""

    beta: np.ndarray
    beta_labels: tuple[str, ...]
    phi: np.ndarray
    psi: np.ndarray
    model_vcov: np.ndarray
    converged_structure: str
    converged: bool
    n_iterations: int
    final_gradient_norm: float
    objective_value: float
    n_participants: int
    n_observations: int
    ladder_attempts: tuple[tuple[str, str], ...]
    design: DesignMatrices = field(repr=False)
    outcomes: np.ndarray = field(repr=False)
    workspace: "_Workspace" = field(repr=False)

    @property
    def covariance_spec(self) -> cov.CovarianceSpec:
        return cov.CovarianceSpec(self.converged_structure, self.design.n_visits)


def _solve_normal_equations(workspace: _Workspace, psi: np.ndarray):
    a, b, *_ = workspace.normal_equations(psi)
    try:
        ca = cho_factor(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        aliased = _aliased(workspace)
        message = "singular information matrix"
        if aliased:
            message += " (aliased columns: " + ", ".join(aliased) + ")"
        raise RankError(message, aliased=aliased) from exc
    beta = cho_solve(ca, b, check_finite=False)
    vcov = cho_solve(ca, np.eye(workspace.p), check_finite=False)
    return beta, (vcov + vcov.T) / 2.0


def _aliased(workspace: _Workspace) -> tuple[str, ...]:
    x_all = np.vstack([np.asarray(m) for m in workspace.design.matrices])
    return cov._aliased_columns(x_all, workspace.design.column_labels)


def gls_solve(design: DesignMatrices, outcomes: np.ndarray, psi: np.ndarray):
    """Generalized least squares at a fixed structure matrix.

    Returns ``(beta, model_vcov)`` where ``model_vcov`` is the inverse of the
    block-accumulated information ``sum_i X_i' R_i^-1 X_i``.

    Raises:
        RankError: singular information matrix (message names aliased columns).
    """
    workspace = _Workspace(design, outcomes)
    psi = np.asarray(psi, dtype=float)
    beta, vcov = _solve_normal_equations(workspace, psi)
    return beta, vcov


def reml_neg2loglik(design: DesignMatrices, outcomes: np.ndarray, spec: cov.CovarianceSpec,
                    phi: np.ndarray, gradient: bool = False):
    """Evaluate the REML deviance (optionally with its analytic gradient)."""
    workspace = _Workspace(design, outcomes)
    if gradient:
        return workspace.objective_and_grad(spec, phi)
    return workspace.objective(spec, phi)


def _scoring_polish(workspace: _Workspace, spec: cov.CovarianceSpec, phi: np.ndarray):
    """Fisher-scoring steps to push the gradient below tolerance.

    Quasi-Newton line searches stall once objective differences fall under
    float64 resolution, which at large n happens while the gradient max-norm
    is still around 1e-6. The analytic gradient itself stays accurate, so a
    few expected-information (scoring) steps, which never compare objective
    values, finish the job. Steps are only accepted while the gradient norm
    shrinks.
    """
    value, grad = workspace.objective_and_grad(spec, phi)
    if not np.isfinite(value):
        return phi, value, grad, 0
    steps = 0
    for _ in range(10):
        gmax = float(np.max(np.abs(grad)))
        if gmax < 0.1 * _GRAD_TOL:
            break
        try:
            info = workspace.expected_information(spec, phi)
            step = -np.linalg.pinv(info) @ grad / 2.0
        except (np.linalg.LinAlgError, ValueError):
            break
        accepted = False
        for _ in range(6):
            candidate = phi + step
            cand_value, cand_grad = workspace.objective_and_grad(spec, candidate)
            if np.isfinite(cand_value) and float(np.max(np.abs(cand_grad))) < gmax:
                phi, value, grad = candidate, cand_value, cand_grad
                accepted = True
                break
            step *= 0.5
        steps += 1
        if not accepted:
            break
    return phi, value, grad, steps


def _optimize_structure(workspace: _Workspace, spec: cov.CovarianceSpec, phi0: np.ndarray):
    """Quasi-Newton run, scoring polish, and a derivative-free rescue.

    Returns ``(phi, objective, gradient, total iterations)`` of the best
    candidate found, preferring converged candidates and breaking ties on the
    objective value.
    """

    def fun(phi):
        return workspace.objective_and_grad(spec, phi)

    n_iter = 0
    candidates = []

    def attempt(start):
        nonlocal n_iter
        res = optimize.minimize(fun, start, jac=True, method="BFGS",
                                options={"gtol": _GRAD_TOL, "maxiter": _MAX_ITER})
        n_iter += int(res.nit)
        x = res.x if np.all(np.isfinite(res.x)) else np.asarray(start, dtype=float)
        x, value, grad, steps = _scoring_polish(workspace, spec, x)
        n_iter += steps
        candidates.append((x, value, grad))
        return _grad_ok(value, grad)

    if attempt(phi0):
        return candidates[-1] + (n_iter,)
    if attempt(candidates[-1][0]):
        return candidates[-1] + (n_iter,)

    finite = [c for c in candidates if np.isfinite(c[1])]
    start = min(finite, key=lambda c: c[1])[0] if finite else phi0
    rescue = optimize.minimize(
        lambda phi: workspace.objective(spec, phi),
        start,
        method="Nelder-Mead",
        options={"maxiter": 200 * len(phi0), "xatol": 1e-9, "fatol": 1e-12},
    )
    n_iter += int(rescue.nit)
    attempt(rescue.x if np.all(np.isfinite(rescue.x)) else start)

    converged = [c for c in candidates if _grad_ok(c[1], c[2])]
    pool = converged or [c for c in candidates if np.isfinite(c[1])] or candidates
    best = min(pool, key=lambda c: c[1])
    return best + (n_iter,)


def _grad_ok(value: float, grad: np.ndarray) -> bool:
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        return False
    return bool(np.max(np.abs(grad)) < _GRAD_TOL)


def fit_mmrm(data: TrialDataset, spec: ModelSpec) -> FitResult:
    """Fit the repeated-measures model by REML with the structure ladder.

    Structures are tried in ladder order; an attempt fails on a non-finite
    objective or a gradient max-norm still above 1e-6 after the quasi-Newton
    run (200 iterations), a derivative-free rescue, and a polish. The first
    structure that converges wins.

    Raises:
        ConvergenceError: every ladder entry failed (diagnostics attached).
        RankError: the stacked design is rank deficient.
        DataError: fewer observations than coefficients + 1.
    """
    design = build_design(data, spec)
    outcomes = stack_outcomes(data, design)
    if design.n_observations < design.n_columns + 1:
        raise DataError(
            f"need at least {design.n_columns + 1} observations to fit "
            f"{design.n_columns} coefficients, have {design.n_observations}"
        )
    if any(not rec.is_monotone for rec in data.participants):
        warnings.warn(
            "intermittent (non-monotone) outcome missingness detected; "
            "the affected rows are simply dropped",
            stacklevel=2,
        )
    x_all = np.vstack([np.asarray(m) for m in design.matrices])
    if np.linalg.matrix_rank(x_all) < design.n_columns:
        raise RankError(
            "rank-deficient design",
            aliased=cov._aliased_columns(x_all, design.column_labels),
        )

    workspace = _Workspace(design, outcomes)
    attempts: list[tuple[str, str]] = []
    for kind in spec.covariance_ladder:
        cov_spec = cov.CovarianceSpec(kind, design.n_visits)
        try:
            phi0 = cov.initialize_params(data, design, cov_spec)
        except Exception as exc:  # rank/decomposition problems are not rescuable here
            attempts.append((kind, f"initialization failed: {exc}"))
            continue
        phi_hat, value, grad, n_iter = _optimize_structure(workspace, cov_spec, phi0)
        gnorm = float(np.max(np.abs(grad))) if np.all(np.isfinite(grad)) else np.inf
        if not _grad_ok(value, grad):
            attempts.append(
                (kind, f"no convergence: gradient max-norm {gnorm:.3e} after rescue")
            )
            continue
        try:
            psi = cov.materialize(cov_spec, phi_hat)
            beta, vcov = _solve_normal_equations(workspace, psi)
        except (RankError, ValueError) as exc:
            attempts.append((kind, f"solution rejected: {exc}"))
            continue
        attempts.append((kind, "converged"))
        return FitResult(
            beta=beta,
            beta_labels=design.column_labels,
            phi=np.asarray(phi_hat, dtype=float),
            psi=psi,
            model_vcov=vcov,
            converged_structure=kind,
            converged=True,
            n_iterations=n_iter,
            final_gradient_norm=gnorm,
            objective_value=float(value),
            n_participants=len(data.participants),
            n_observations=design.n_observations,
            ladder_attempts=tuple(attempts),
            design=design,
            outcomes=outcomes,
            workspace=workspace,
        )
    raise ConvergenceError(
        "every covariance structure in the ladder failed to converge",
        attempts=tuple(attempts),
    )

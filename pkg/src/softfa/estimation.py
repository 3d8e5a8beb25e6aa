"""Penalised maximum likelihood fitting for the factor model.

The pipeline follows a fixed recipe: a principal-axis start, a block of EM
iterations on the penalised log-likelihood, then Newton-Raphson refinement
with step halving.  Penalised fits optimise over (loadings, log psi) so the
uniquenesses stay positive; unpenalised maximum likelihood optimises over
(loadings, psi) unconstrained, which is what lets Heywood cases surface as
zero or negative unique-variance estimates.  A fit never raises on
optimisation trouble: failures are recorded and fed to the Heywood
heuristics.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import LinAlgError, lstsq, solve as linalg_solve

from ._linalg import (
    NotPositiveDefiniteError,
    cholesky_or_none,
    inverse_from_factor,
    logdet_from_factor,
    solve_from_factor,
    spd_factor,
    try_spd_factor,
)
from .model import (
    LOG_2PI,
    FactorParams,
    SampleMoments,
    assemble_sigma,
    log_likelihood,
)
from .penalties import PenaltySpec, effective_rho, penalty_value

HEYWOOD_REASONS = ("procedure_failed", "gradient_step_large", "psi_near_zero")

_FD_STEP = 1e-6
_MAX_HALVINGS = 30


@dataclass(frozen=True)
class FitOptions:
    """Deterministic knobs of the fitting pipeline.

    The Heywood thresholds mirror the flagging heuristics: a normalised
    Newton step above ``heywood_step_threshold`` or a uniqueness below
    ``heywood_psi_threshold`` marks the fit as a boundary case.
    """

    em_iterations: int = 100
    newton_max_iterations: int = 200
    gradient_tolerance: float = 1e-8
    heywood_step_threshold: float = 1e-4
    heywood_psi_threshold: float = 1e-4
    start: FactorParams | None = None

    def __post_init__(self):
        if self.em_iterations < 0:
            raise ValueError("em_iterations must be >= 0")
        if self.newton_max_iterations < 1:
            raise ValueError("newton_max_iterations must be >= 1")
        for name in ("gradient_tolerance", "heywood_step_threshold", "heywood_psi_threshold"):
            if not (getattr(self, name) > 0):
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class HeywoodDiagnosis:
    """Outcome of the boundary-case heuristics for one fit."""

    flagged: bool
    reasons: frozenset
    min_psi: float


class IterationCounts(NamedTuple):
    em: int
    newton: int


@dataclass(frozen=True)
class NewtonResult:
    params: FactorParams
    converged: bool
    iterations: int
    max_step: float
    failed: bool


@dataclass(frozen=True)
class FitResult:
    """Estimates plus the optimisation and diagnosis record of one fit."""

    params: FactorParams
    loglik: float
    penalty: float
    penalized_loglik: float
    converged: bool
    iterations: IterationCounts
    heywood: HeywoodDiagnosis
    max_newton_step: float


def principal_axis_start(moments: SampleMoments, q: int) -> FactorParams:
    """Principal-axis starting values.

    psi0_j = (1 - q/(2p)) / (S^-1)_jj, and the loadings come from the top-q
    eigenpairs of psi0^-1/2 S psi0^-1/2 with eigenvalues floored at one.
    """
    p = moments.p
    if not 1 <= q < p:
        raise ValueError(f"need 1 <= q < p, got q={q}, p={p}")
    lower = spd_factor(moments.cov, label="cov")
    w_diag = np.diagonal(inverse_from_factor(lower))
    psi0 = (1.0 - 0.5 * q / p) / w_diag
    scale = 1.0 / np.sqrt(psi0)
    sstar = moments.cov * np.outer(scale, scale)
    vals, vecs = np.linalg.eigh(sstar)
    top_vals = vals[::-1][:q]
    top_vecs = vecs[:, ::-1][:, :q]
    lam0 = np.sqrt(psi0)[:, None] * top_vecs * np.sqrt(np.maximum(top_vals - 1.0, 0.0))
    return FactorParams(lam0, psi0)


def _em_update(lam, psi, s, rho, family):
    """One exact EM update of the penalised objective, on raw arrays.

    The E-step uses the Gaussian conditional moments of the factors given
    the data through S only; the M-step is closed form for every family:
    the loading-trace penalty turns the loadings update into a ridge solve,
    and the sample-variance penalty adds rho * S_jj to the residual in the
    psi update.
    """
    p, q = lam.shape
    sigma = lam @ lam.T
    idx = np.arange(p)
    sigma[idx, idx] += psi
    lower = cholesky_or_none(sigma)
    if lower is None:
        raise NotPositiveDefiniteError("model covariance is not positive definite")
    w = inverse_from_factor(lower)
    b = lam.T @ w
    cxz = s @ b.T
    czz = np.eye(q) - b @ lam + b @ cxz
    k = czz + rho * np.eye(q) if family == "loading_trace" else czz
    lam_new = linalg_solve(k, cxz.T, assume_a="sym").T
    resid = np.diagonal(s) - np.einsum("ij,ij->i", lam_new, cxz)
    psi_new = resid + rho * np.diagonal(s) if family == "sample_variance" else resid
    return lam_new, psi_new


def em_step(
    params: FactorParams, moments: SampleMoments, spec: PenaltySpec
) -> FactorParams:
    """One monotone EM step on the penalised log-likelihood."""
    if not params.interior:
        raise ValueError("EM requires strictly positive uniquenesses")
    rho = effective_rho(spec, moments.n)
    lam, psi = _em_update(
        params.loadings.copy(), params.uniquenesses.copy(), moments.cov, rho, spec.family
    )
    return FactorParams(lam, psi)


def _objective(lam, psi, s, n, rho, family):
    """Penalised log-likelihood on raw arrays; -inf outside the PD region."""
    p = lam.shape[0]
    sigma = lam @ lam.T
    idx = np.arange(p)
    sigma[idx, idx] += psi
    lower = try_spd_factor(sigma)
    if lower is None:
        return float("-inf")
    kernel = logdet_from_factor(lower) + float(
        np.trace(solve_from_factor(lower, s))
    )
    value = -0.5 * n * p * LOG_2PI - 0.5 * n * kernel
    if family == "loading_trace":
        value -= 0.5 * rho * n * float(((lam**2).sum(axis=1) / psi).sum())
    elif family == "sample_variance":
        value -= 0.5 * rho * n * float((np.diagonal(s) / psi).sum())
    return value


def _gradient(lam, psi, s, n, rho, family, log_scale):
    """Gradient of the penalised log-likelihood in optimiser coordinates.

    Returns None when the model covariance cannot be factorised so the
    caller can record a procedure failure instead of raising.
    """
    p = lam.shape[0]
    sigma = lam @ lam.T
    idx = np.arange(p)
    sigma[idx, idx] += psi
    lower = cholesky_or_none(sigma)
    if lower is None:
        return None
    w = inverse_from_factor(lower)
    a = w - w @ s @ w
    a = (a + a.T) / 2.0
    d_lam = -n * (a @ lam)
    d_psi = -0.5 * n * np.diagonal(a).copy()
    if family == "loading_trace":
        d_lam = d_lam - rho * n * lam / psi[:, None]
        d_psi = d_psi + 0.5 * rho * n * (lam**2).sum(axis=1) / psi**2
    elif family == "sample_variance":
        d_psi = d_psi + 0.5 * rho * n * np.diagonal(s) / psi**2
    if log_scale:
        d_psi = d_psi * psi
    return np.concatenate([d_lam.ravel(), d_psi])


def _fd_hessian(grad_at, v, h=_FD_STEP):
    """Central finite differences of the analytic gradient, symmetrised."""
    d = v.size
    hess = np.empty((d, d))
    for j in range(d):
        vp = v.copy()
        vp[j] += h
        vm = v.copy()
        vm[j] -= h
        gp = grad_at(vp)
        gm = grad_at(vm)
        if gp is None or gm is None:
            return None
        hess[:, j] = (gp - gm) / (2.0 * h)
    if not np.isfinite(hess).all():
        return None
    return (hess + hess.T) / 2.0


def _normalized_step(grad_at, v, with_gradient=False):
    """Newton step H^+ g at v, or None when it cannot be computed.

    Rotation invariance makes the Hessian rank deficient by exactly
    q(q-1)/2 directions at every point, so the system is solved in the
    minimum-norm least-squares sense, which confines the step to the
    identified quotient of the parameter space.
    """
    g = grad_at(v)
    if g is None or not np.isfinite(g).all():
        return None
    hess = _fd_hessian(grad_at, v)
    if hess is None:
        return None
    try:
        step, _, _, _ = lstsq(hess, g, cond=1e-10, check_finite=False)
    except (LinAlgError, ValueError):
        return None
    if not np.isfinite(step).all():
        return None
    return (step, g) if with_gradient else step


def _newton(lam, psi, s, n, rho, family, opts: FitOptions):
    """Newton-Raphson with step halving; never raises on failure."""
    p, q = lam.shape
    log_scale = family != "none"

    def unpack(v):
        lam_v = v[: p * q].reshape(p, q)
        second = v[p * q :]
        psi_v = np.exp(second) if log_scale else second
        return lam_v, psi_v

    def obj_at(v):
        lam_v, psi_v = unpack(v)
        return _objective(lam_v, psi_v, s, n, rho, family)

    def grad_at(v):
        lam_v, psi_v = unpack(v)
        return _gradient(lam_v, psi_v, s, n, rho, family, log_scale)

    second = np.log(psi) if log_scale else psi
    v = np.concatenate([lam.ravel(), second])
    f0 = obj_at(v)
    converged = False
    failed = False
    iterations = 0
    max_step = float("nan")
    if not np.isfinite(f0):
        failed = True
    else:
        no_progress = 0
        for _ in range(opts.newton_max_iterations):
            out = _normalized_step(grad_at, v, with_gradient=True)
            if out is None:
                failed = True
                break
            step, grad = out
            max_step = float(np.abs(step).max())
            if max_step < opts.gradient_tolerance:
                converged = True
                break
            predicted_gain = -0.5 * float(grad @ step)
            noise_floor = 4096.0 * np.finfo(float).eps * max(1.0, abs(f0))
            accepted = False
            # An extended step that strictly improves shortens the long
            # crawls toward boundary optima; otherwise fall back to the
            # full step and halvings.
            for scale in (4.0, 2.0):
                ft = obj_at(v - scale * step)
                if ft > f0:
                    vt = v - scale * step
                    accepted = True
                    break
            if not accepted:
                scale = 1.0
                for _ in range(_MAX_HALVINGS + 1):
                    vt = v - scale * step
                    ft = obj_at(vt)
                    if ft >= f0:
                        accepted = True
                        break
                    scale *= 0.5
            if not accepted:
                # Newton direction failed outright; a short gradient-ascent
                # step still improves at any non-stationary point and keeps
                # the iteration from stalling on indefinite curvature.
                ascent = grad / max(float(np.abs(grad).max()), 1.0)
                scale = 1.0
                for _ in range(_MAX_HALVINGS + 1):
                    vt = v + scale * ascent
                    ft = obj_at(vt)
                    if ft > f0:
                        accepted = True
                        break
                    scale *= 0.5
            if accepted:
                gain = ft - f0
                v = vt
                f0 = ft
            # Once improvements sink below floating-point resolution of the
            # objective, further iterations cannot make measurable progress.
            # If the quadratic model agrees that nothing remains, this is
            # convergence; otherwise record a failure.
            if not accepted:
                no_progress = 3
            else:
                no_progress = no_progress + 1 if gain <= noise_floor else 0
                iterations += 1
            if no_progress >= 3:
                if 0.0 <= predicted_gain <= noise_floor:
                    converged = True
                else:
                    failed = True
                break
        else:
            failed = True  # iteration cap reached
    if not converged:
        step = _normalized_step(grad_at, v)
        max_step = float(np.abs(step).max()) if step is not None else float("nan")
    lam_out, psi_out = unpack(v)
    return lam_out.copy(), psi_out.copy(), converged, iterations, max_step, failed


def newton_refine(
    params: FactorParams,
    moments: SampleMoments,
    spec: PenaltySpec,
    opts: FitOptions = FitOptions(),
) -> NewtonResult:
    """Refine interior parameters by Newton-Raphson on the penalised objective."""
    if not params.interior:
        raise ValueError("Newton refinement starts from interior parameters")
    rho = effective_rho(spec, moments.n)
    lam, psi, converged, iterations, max_step, failed = _newton(
        params.loadings.copy(),
        params.uniquenesses.copy(),
        moments.cov,
        moments.n,
        rho,
        spec.family,
        opts,
    )
    return NewtonResult(
        params=FactorParams(lam, psi),
        converged=converged,
        iterations=iterations,
        max_step=max_step,
        failed=failed,
    )


def heywood_diagnose(
    *,
    procedure_failed: bool,
    max_newton_step: float,
    min_psi: float,
    opts: FitOptions = FitOptions(),
) -> HeywoodDiagnosis:
    """Flag a completed optimisation attempt as a (near-)Heywood case.

    Flagged when the procedure failed, when the normalised Newton step at
    the estimate exceeds the step threshold, or when any uniqueness falls
    below the psi threshold; every triggered clause is listed.
    """
    reasons = set()
    if procedure_failed:
        reasons.add("procedure_failed")
    if np.isfinite(max_newton_step) and max_newton_step > opts.heywood_step_threshold:
        reasons.add("gradient_step_large")
    if min_psi < opts.heywood_psi_threshold:
        reasons.add("psi_near_zero")
    return HeywoodDiagnosis(
        flagged=bool(reasons), reasons=frozenset(reasons), min_psi=float(min_psi)
    )


def fit(
    moments: SampleMoments,
    q: int,
    spec: PenaltySpec = PenaltySpec.ml(),
    opts: FitOptions = FitOptions(),
) -> FitResult:
    """Fit the factor model: start -> EM iterations -> Newton -> diagnosis.

    Deterministic in its inputs; optimisation failures are encoded in the
    result rather than raised.
    """
    p = moments.p
    if not 1 <= q < p:
        raise ValueError(f"need 1 <= q < p, got q={q}, p={p}")
    if opts.start is not None:
        start = opts.start
        if start.p != p or start.q != q:
            raise ValueError("starting values do not match the requested model")
        if not start.interior:
            raise ValueError("starting values must be interior")
    else:
        start = principal_axis_start(moments, q)
    rho = effective_rho(spec, moments.n)
    lam = start.loadings.copy()
    psi = start.uniquenesses.copy()
    s = moments.cov
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        for _ in range(opts.em_iterations):
            lam, psi = _em_update(lam, psi, s, rho, spec.family)
        lam, psi, converged, newton_iters, max_step, failed = _newton(
            lam, psi, s, moments.n, rho, spec.family, opts
        )
    params = FactorParams(lam, psi)
    loglik = log_likelihood(params, moments)
    penalty = penalty_value(spec, params, moments)
    diagnosis = heywood_diagnose(
        procedure_failed=failed,
        max_newton_step=max_step,
        min_psi=float(psi.min()),
        opts=opts,
    )
    return FitResult(
        params=params,
        loglik=loglik,
        penalty=penalty,
        penalized_loglik=loglik + penalty,
        converged=converged,
        iterations=IterationCounts(em=opts.em_iterations, newton=newton_iters),
        heywood=diagnosis,
        max_newton_step=max_step,
    )

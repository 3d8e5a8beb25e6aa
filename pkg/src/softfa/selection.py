"""Information criteria and selection of the number of factors.

AIC and BIC are computed from the log-likelihood kernel, i.e. excluding the
additive normal constant -n p log(2 pi) / 2, which matches how these
criteria are conventionally reported for factor models fitted to published
correlation matrices.  Criteria are always evaluated on the unpenalised
log-likelihood at the (possibly penalised) estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .estimation import FitOptions, FitResult, fit
from .model import LOG_2PI, SampleMoments
from .penalties import PenaltySpec


def free_parameter_count(p: int, q: int) -> int:
    """Count of free (Lambda, Psi) parameters after rotational indeterminacy.

    p(q + 1) - q(q - 1)/2: loadings and uniquenesses minus the dimension of
    the orthogonal group acting on the factors.  Mean parameters are not
    counted; they cancel in model comparisons.
    """
    if not 1 <= q < p:
        raise ValueError(f"need 1 <= q < p, got q={q}, p={p}")
    return p * (q + 1) - q * (q - 1) // 2


def information_criteria(loglik: float, p: int, q: int, n: int) -> tuple[float, float]:
    """(AIC, BIC) = (-2 loglik + 2k, -2 loglik + k log n) with k free params."""
    k = free_parameter_count(p, q)
    aic = -2.0 * loglik + 2.0 * k
    bic = -2.0 * loglik + k * math.log(n)
    return aic, bic


@dataclass(frozen=True)
class SelectionRow:
    q: int
    loglik: float
    k_free_params: int
    aic: float
    bic: float
    heywood_flagged: bool


@dataclass(frozen=True)
class SelectionResult:
    """Per-q criteria (ascending in q) and the argmin q for each criterion."""

    per_q: tuple
    best_aic: int
    best_bic: int


def _loglik_kernel(result: FitResult, moments: SampleMoments) -> float:
    """Log-likelihood without the additive constant; -inf sentinel on failure."""
    constant = -0.5 * moments.n * moments.p * LOG_2PI
    kernel = result.loglik - constant
    if not np.isfinite(kernel):
        return float("-inf")
    return kernel


def _fit_grid(
    moments: SampleMoments,
    q_grid,
    spec: PenaltySpec,
    opts: FitOptions,
):
    """Fit every q in the grid; returns (SelectionResult, {q: FitResult})."""
    qs = sorted(set(int(q) for q in q_grid))
    if not qs:
        raise ValueError("q_grid must not be empty")
    for q in qs:
        if not 1 <= q < moments.p:
            raise ValueError(f"q={q} outside the valid range [1, {moments.p - 1}]")
    rows = []
    fits = {}
    for q in qs:
        result = fit(moments, q, spec, opts)
        fits[q] = result
        kernel = _loglik_kernel(result, moments)
        aic, bic = information_criteria(kernel, moments.p, q, moments.n)
        rows.append(
            SelectionRow(
                q=q,
                loglik=kernel,
                k_free_params=free_parameter_count(moments.p, q),
                aic=aic,
                bic=bic,
                heywood_flagged=result.heywood.flagged,
            )
        )
    aics = [row.aic for row in rows]
    bics = [row.bic for row in rows]
    # rows are ascending in q, so argmin resolves ties toward smaller q
    best_aic = rows[int(np.argmin(aics))].q
    best_bic = rows[int(np.argmin(bics))].q
    selection = SelectionResult(per_q=tuple(rows), best_aic=best_aic, best_bic=best_bic)
    return selection, fits


def select_q(
    moments: SampleMoments,
    q_grid,
    spec: PenaltySpec = PenaltySpec.ml(),
    opts: FitOptions = FitOptions(),
) -> SelectionResult:
    """Fit every q in the grid and pick the AIC- and BIC-minimising counts.

    Heywood-flagged fits still enter the comparison through their achieved
    log-likelihood; fits with a non-finite log-likelihood carry a -inf
    sentinel and are never selected.
    """
    selection, _ = _fit_grid(moments, q_grid, spec, opts)
    return selection

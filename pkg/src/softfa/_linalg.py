"""Cholesky-based helpers for symmetric positive definite matrices.

All positive-definiteness checks in the package go through a symmetric
factorisation attempt plus a reciprocal-condition floor, and log-determinants
and solves reuse the factor.  Near-singular matrices are treated as not
positive definite rather than silently inverted.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve, get_lapack_funcs

RCOND_FLOOR = 1e-12

_pocon = None


class NotPositiveDefiniteError(ValueError):
    """A matrix required to be (numerically) positive definite is not."""


def _pocon_func(a):
    global _pocon
    if _pocon is None:
        _pocon, = get_lapack_funcs(("pocon",), (a,))
    return _pocon


def cholesky_or_none(a):
    """Lower Cholesky factor of ``a``, or None if the factorisation fails."""
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return None


def rcond_from_cholesky(a, lower):
    """LAPACK 1-norm reciprocal condition estimate from a Cholesky factor."""
    anorm = np.abs(a).sum(axis=0).max()
    if anorm == 0.0 or not np.isfinite(anorm):
        return 0.0
    rcond, info = _pocon_func(a)(lower, anorm, uplo=b"L")
    if info != 0:
        return 0.0
    return float(rcond)


def try_spd_factor(a, rcond_floor=RCOND_FLOOR):
    """Lower Cholesky factor of ``a`` or None if not PD to within the floor."""
    lower = cholesky_or_none(a)
    if lower is None:
        return None
    if rcond_from_cholesky(a, lower) < rcond_floor:
        return None
    return lower


def spd_factor(a, rcond_floor=RCOND_FLOOR, label="matrix"):
    """Lower Cholesky factor of ``a``; raises if not numerically PD."""
    lower = cholesky_or_none(a)
    if lower is None:
        raise NotPositiveDefiniteError(f"{label} is not positive definite")
    rcond = rcond_from_cholesky(a, lower)
    if rcond < rcond_floor:
        raise NotPositiveDefiniteError(
            f"{label} is numerically singular (rcond {rcond:.2e} < {rcond_floor:.0e})"
        )
    return lower


def logdet_from_factor(lower):
    """log det of the matrix whose lower Cholesky factor is given."""
    return 2.0 * float(np.log(np.diagonal(lower)).sum())


def solve_from_factor(lower, b):
    """Solve ``A x = b`` given the lower Cholesky factor of A."""
    return cho_solve((lower, True), b)


def inverse_from_factor(lower):
    """Inverse of the matrix whose lower Cholesky factor is given."""
    return cho_solve((lower, True), np.eye(lower.shape[0]))


def check_symmetric(a, rel_tol=1e-12, label="matrix"):
    """Validate that ``a`` is square and symmetric to relative tolerance."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"{label} must be square, got shape {a.shape}")
    scale = max(1.0, float(np.abs(a).max()))
    if float(np.abs(a - a.T).max()) > rel_tol * scale:
        raise ValueError(f"{label} is not symmetric")
    return a

"""Normal linear factor model: parameterisation, likelihood, and gradients.

The model for a p-vector x with q < p factors is x = mu + L z + e, with
z ~ N(0, I_q), e ~ N(0, Psi), Psi diagonal, giving Var(x) = L L' + Psi.
After profiling out the mean at the sample average, the log-likelihood is a
function of the loadings and uniquenesses through Sigma = L L' + Psi only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._linalg import (
    NotPositiveDefiniteError,
    check_symmetric,
    inverse_from_factor,
    logdet_from_factor,
    solve_from_factor,
    spd_factor,
    try_spd_factor,
)

LOG_2PI = math.log(2.0 * math.pi)


def _frozen_array(value, dtype=float):
    arr = np.array(value, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FactorParams:
    """Loadings matrix (p x q) and unique variances (length p).

    Uniquenesses are strictly positive on the interior of the parameter
    space.  Maximum likelihood estimates may leave the interior (Heywood
    cases with zero or negative unique variances), so positivity is not
    enforced at construction: use :attr:`interior` to test it, and note that
    penalty evaluation rejects non-interior points.
    """

    loadings: np.ndarray
    uniquenesses: np.ndarray

    def __post_init__(self):
        lam = _frozen_array(self.loadings)
        psi = _frozen_array(self.uniquenesses)
        if lam.ndim != 2:
            raise ValueError(f"loadings must be a matrix, got shape {lam.shape}")
        p, q = lam.shape
        if not (p >= 1 and 1 <= q < p):
            raise ValueError(f"need p >= 1 and 1 <= q < p, got p={p}, q={q}")
        if psi.shape != (p,):
            raise ValueError(
                f"uniquenesses must have length {p}, got shape {psi.shape}"
            )
        if not (np.isfinite(lam).all() and np.isfinite(psi).all()):
            raise ValueError("parameters must be finite")
        object.__setattr__(self, "loadings", lam)
        object.__setattr__(self, "uniquenesses", psi)

    @property
    def p(self) -> int:
        return self.loadings.shape[0]

    @property
    def q(self) -> int:
        return self.loadings.shape[1]

    @property
    def interior(self) -> bool:
        """True when every unique variance is strictly positive."""
        return bool((self.uniquenesses > 0).all())


@dataclass(frozen=True)
class SampleMoments:
    """Sample size, mean and covariance (divisor n) of an observed sample.

    ``standardized`` marks a correlation matrix supplied directly, e.g. a
    published correlation matrix ingested together with its sample size.
    """

    n: int
    mean: np.ndarray
    cov: np.ndarray
    standardized: bool = False

    def __post_init__(self):
        if not (isinstance(self.n, (int, np.integer)) and self.n >= 1):
            raise ValueError(f"n must be a positive integer, got {self.n!r}")
        cov = check_symmetric(self.cov, rel_tol=1e-12, label="cov")
        cov = _frozen_array(cov)
        mean = _frozen_array(self.mean)
        if mean.shape != (cov.shape[0],):
            raise ValueError(
                f"mean has shape {mean.shape}, expected ({cov.shape[0]},)"
            )
        if not (np.isfinite(cov).all() and np.isfinite(mean).all()):
            raise ValueError("moments must be finite")
        spd_factor(cov, label="cov")
        if self.standardized:
            if np.abs(np.diagonal(cov) - 1.0).max() > 1e-10:
                raise ValueError("standardized moments require unit diagonal")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def p(self) -> int:
        return self.cov.shape[0]


@dataclass(frozen=True)
class GradientVector:
    """Gradient with respect to loadings and uniquenesses."""

    d_loadings: np.ndarray
    d_uniquenesses: np.ndarray

    def __post_init__(self):
        dlam = _frozen_array(self.d_loadings)
        dpsi = _frozen_array(self.d_uniquenesses)
        if dlam.ndim != 2 or dpsi.shape != (dlam.shape[0],):
            raise ValueError("gradient shapes do not match a parameter set")
        object.__setattr__(self, "d_loadings", dlam)
        object.__setattr__(self, "d_uniquenesses", dpsi)

    def ravel(self) -> np.ndarray:
        """Flat view [vec(d_loadings), d_uniquenesses]."""
        return np.concatenate([self.d_loadings.ravel(), self.d_uniquenesses])


def assemble_sigma(params: FactorParams) -> np.ndarray:
    """Model covariance L L' + diag(psi)."""
    lam = params.loadings
    sigma = lam @ lam.T
    idx = np.arange(params.p)
    sigma[idx, idx] += params.uniquenesses
    return sigma


def sample_moments(data) -> SampleMoments:
    """Mean and covariance (divisor n) of an n x p data matrix.

    Requires n > p so the covariance can have full rank; rejects non-finite
    entries and degenerate samples (e.g. constant columns).
    """
    x = np.asarray(data, dtype=float)
    if x.ndim != 2:
        raise ValueError(f"data must be an n x p matrix, got shape {x.shape}")
    n, p = x.shape
    if n <= p:
        raise ValueError(f"need n > p observations, got n={n}, p={p}")
    if not np.isfinite(x).all():
        raise ValueError("data contains non-finite values")
    mean = x.mean(axis=0)
    centred = x - mean
    cov = centred.T @ centred / n
    cov = (cov + cov.T) / 2.0
    return SampleMoments(n=n, mean=mean, cov=cov, standardized=False)


def log_likelihood(params: FactorParams, moments: SampleMoments) -> float:
    """Profile log-likelihood C - (n/2) [log det Sigma + tr(Sigma^-1 S)].

    C = -n p log(2 pi) / 2.  Returns ``-inf`` when the model covariance is
    numerically singular (factorisation failure or reciprocal condition
    below the floor).
    """
    sigma = assemble_sigma(params)
    lower = try_spd_factor(sigma)
    if lower is None:
        return float("-inf")
    n = moments.n
    half_quad = logdet_from_factor(lower) + float(
        np.trace(solve_from_factor(lower, moments.cov))
    )
    return -0.5 * n * params.p * LOG_2PI - 0.5 * n * half_quad


def score(params: FactorParams, moments: SampleMoments) -> GradientVector:
    """Analytic gradient of the profile log-likelihood.

    d/dL = -n (Sigma^-1 - Sigma^-1 S Sigma^-1) L and
    d/dpsi_j = -(n/2) (Sigma^-1 - Sigma^-1 S Sigma^-1)_jj.
    """
    sigma = assemble_sigma(params)
    lower = try_spd_factor(sigma)
    if lower is None:
        raise NotPositiveDefiniteError("model covariance is not positive definite")
    n = moments.n
    w = inverse_from_factor(lower)
    ws = w @ moments.cov
    a = w - ws @ w
    a = (a + a.T) / 2.0
    return GradientVector(
        d_loadings=-n * (a @ params.loadings),
        d_uniquenesses=-0.5 * n * np.diagonal(a).copy(),
    )


def discrepancy(s1, s2) -> float:
    """Likelihood discrepancy log det S2 + tr(S2^-1 S1) - p - log det S1.

    Nonnegative, and zero exactly when the two matrices coincide.  Raises
    when either input is not symmetric positive definite.
    """
    s1 = check_symmetric(s1, label="S1")
    s2 = check_symmetric(s2, label="S2")
    if s1.shape != s2.shape:
        raise ValueError("matrices must share a common shape")
    l1 = spd_factor(s1, label="S1")
    l2 = spd_factor(s2, label="S2")
    p = s1.shape[0]
    value = (
        logdet_from_factor(l2)
        + float(np.trace(solve_from_factor(l2, s1)))
        - p
        - logdet_from_factor(l1)
    )
    return float(value)


def communalities(params: FactorParams) -> np.ndarray:
    """Per-item explained variance: row sums of squared loadings."""
    return (params.loadings**2).sum(axis=1)

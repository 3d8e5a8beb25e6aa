"""Penalties that keep unique-variance estimates away from zero.

Two families are implemented, both of the form

    P(theta) = -(rho_eff * n / 2) * sum_j A_jj / psi_j

with A_jj the squared norm of the j-th loadings row (``loading_trace``) or
the j-th sample variance (``sample_variance``).  Both are nonpositive,
invariant under rotation of the factors, equivariant under rescaling of the
responses, and diverge to -inf when any psi_j approaches zero, which is what
rules Heywood cases out of penalised fits.

The scaling regimes differ only in how rho depends on n: ``vanilla`` and
``custom`` use a fixed rho, while ``soft`` uses rho = 2 sqrt(2) n^(-3/2),
making the penalty asymptotically negligible relative to the likelihood
while still guaranteeing interior optima.

Note on naming: the literature attributes the two functional forms to
different authors inconsistently, so this package names them by what they
penalise; the command line accepts ``akaike``/``hirose`` as aliases for
``loading-trace``/``sample-variance`` respectively.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .model import FactorParams, GradientVector, SampleMoments, assemble_sigma

FAMILIES = ("none", "loading_trace", "sample_variance")
REGIMES = ("vanilla", "soft", "custom")


@dataclass(frozen=True)
class PenaltySpec:
    """Penalty family plus scaling regime.

    ``rho`` is required (and must be positive) for the ``vanilla`` and
    ``custom`` regimes and must be omitted for ``soft``.
    """

    family: str = "none"
    regime: str = "soft"
    rho: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown penalty family {self.family!r}")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown scaling regime {self.regime!r}")
        if self.regime in ("vanilla", "custom"):
            if self.rho is None or not (float(self.rho) > 0):
                raise ValueError(f"regime {self.regime!r} requires rho > 0")
            object.__setattr__(self, "rho", float(self.rho))
        elif self.rho is not None:
            raise ValueError("soft scaling determines rho from n; do not set it")

    @classmethod
    def ml(cls) -> "PenaltySpec":
        """No penalty (maximum likelihood)."""
        return cls(family="none")

    @classmethod
    def vanilla(cls, family: str, rho: float = 1.0) -> "PenaltySpec":
        return cls(family=family, regime="vanilla", rho=rho)

    @classmethod
    def soft(cls, family: str) -> "PenaltySpec":
        return cls(family=family, regime="soft")

    @classmethod
    def custom(cls, family: str, rho: float) -> "PenaltySpec":
        return cls(family=family, regime="custom", rho=rho)

    @property
    def label(self) -> str:
        if self.family == "none":
            return "none"
        tag = "n^-1/2" if self.regime == "soft" else f"rho={self.rho:g}"
        return f"{self.family}[{tag}]"


def effective_rho(spec: PenaltySpec, n: int) -> float:
    """Penalty strength rho for sample size n under the spec's regime."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if spec.family == "none":
        return 0.0
    if spec.regime == "soft":
        return 2.0 * math.sqrt(2.0) / float(n) ** 1.5
    return float(spec.rho)


def _numerators(spec: PenaltySpec, params: FactorParams, moments: SampleMoments):
    """The A_jj numerators of the penalty, validating interior psi."""
    if (params.uniquenesses <= 0).any():
        raise ValueError("penalty requires strictly positive uniquenesses")
    if spec.family == "loading_trace":
        return (params.loadings**2).sum(axis=1)
    return np.diagonal(moments.cov)


def penalty_value(
    spec: PenaltySpec, params: FactorParams, moments: SampleMoments
) -> float:
    """Penalty value -(rho_eff n / 2) sum_j A_jj / psi_j; always <= 0."""
    if spec.family == "none":
        return 0.0
    a_jj = _numerators(spec, params, moments)
    rho = effective_rho(spec, moments.n)
    return float(-0.5 * rho * moments.n * (a_jj / params.uniquenesses).sum())


def penalty_gradient(
    spec: PenaltySpec, params: FactorParams, moments: SampleMoments
) -> GradientVector:
    """Analytic gradient of :func:`penalty_value`."""
    p, q = params.p, params.q
    if spec.family == "none":
        return GradientVector(np.zeros((p, q)), np.zeros(p))
    a_jj = _numerators(spec, params, moments)
    rho = effective_rho(spec, moments.n)
    psi = params.uniquenesses
    d_psi = 0.5 * rho * moments.n * a_jj / psi**2
    if spec.family == "loading_trace":
        d_lam = -rho * moments.n * params.loadings / psi[:, None]
    else:
        d_lam = np.zeros((p, q))
    return GradientVector(d_lam, d_psi)


@dataclass(frozen=True)
class ProbeConfig:
    """Deterministic probe design for the existence conditions.

    The probe works on a synthetic correlation-scale problem: a seeded
    random sample covariance with unit diagonal, a grid of interior
    parameter points with psi in [0.5, 2], divergence sequences
    psi_j(r) = 10^-r down to 1e-12 along which the model covariance stays
    well conditioned, and per-coordinate 1e-8 perturbations for the
    continuity check.  The small n keeps penalty gradients moderate so the
    1e-6 continuity threshold is meaningful.
    """

    p: int = 5
    q: int = 2
    n: int = 10
    grid_points: int = 50
    max_exponent: int = 12
    seed: int = 1234

    def __post_init__(self):
        if not (1 <= self.q < self.p):
            raise ValueError(f"need 1 <= q < p, got p={self.p}, q={self.q}")
        if self.n < 1 or self.grid_points < 1 or self.max_exponent < 2:
            raise ValueError("invalid probe configuration")


@dataclass(frozen=True)
class ConditionReport:
    """Pass/fail record for the three penalty existence conditions."""

    family: str
    continuity_ok: bool
    boundedness_ok: bool
    divergence_ok: bool
    max_grid_value: float
    max_continuity_delta: float
    divergence_final_value: float
    min_sigma_eigenvalue: float

    @property
    def all_ok(self) -> bool:
        return self.continuity_ok and self.boundedness_ok and self.divergence_ok


def _probe_moments(probe: ProbeConfig, rng) -> SampleMoments:
    a = rng.standard_normal((probe.p, 2 * probe.p))
    s = a @ a.T / (2 * probe.p)
    d = 1.0 / np.sqrt(np.diagonal(s))
    corr = (s * np.outer(d, d) + np.eye(probe.p)) / 2.0
    corr = (corr + corr.T) / 2.0
    np.fill_diagonal(corr, 1.0)
    return SampleMoments(n=probe.n, mean=np.zeros(probe.p), cov=corr, standardized=True)


def _probe_grid(probe: ProbeConfig, rng):
    points = []
    for _ in range(probe.grid_points):
        lam = 0.5 * rng.standard_normal((probe.p, probe.q))
        psi = rng.uniform(0.5, 2.0, size=probe.p)
        points.append(FactorParams(lam, psi))
    return points


def verify_existence_conditions(
    spec: PenaltySpec, probe: ProbeConfig = ProbeConfig()
) -> ConditionReport:
    """Numerically probe continuity, boundedness, and boundary divergence.

    Boundedness asks for a nonpositive maximum over a random grid of
    interior points; divergence asks for a strictly decreasing sequence
    falling below -1e6 as one uniqueness is driven to zero with the model
    covariance kept away from singularity; continuity asks for sub-1e-6
    changes under 1e-8 per-coordinate perturbations at grid points.  The
    unpenalised family trivially passes boundedness and fails divergence.
    """
    rng = np.random.default_rng(probe.seed)
    moments = _probe_moments(probe, rng)
    grid = _probe_grid(probe, rng)

    values = [penalty_value(spec, pt, moments) for pt in grid]
    max_grid_value = float(max(values))
    boundedness_ok = max_grid_value <= 0.0

    max_delta = 0.0
    for pt in grid[:10]:
        base = penalty_value(spec, pt, moments)
        lam, psi = pt.loadings.copy(), pt.uniquenesses.copy()
        for j in range(pt.p):
            bumped = psi.copy()
            bumped[j] += 1e-8
            max_delta = max(
                max_delta,
                abs(penalty_value(spec, FactorParams(lam, bumped), moments) - base),
            )
        bumped_lam = lam.copy()
        bumped_lam[0, 0] += 1e-8
        max_delta = max(
            max_delta,
            abs(penalty_value(spec, FactorParams(bumped_lam, psi), moments) - base),
        )
    continuity_ok = max_delta < 1e-6

    # Divergence sequence: psi_0 = 10^-r with a solid loading on item 0 so
    # the model covariance stays positive definite in the limit.
    lam = np.zeros((probe.p, probe.q))
    lam[:, 0] = 0.1
    lam[0, 0] = 0.8
    psi = np.full(probe.p, 0.5)
    seq = []
    min_eig = np.inf
    for r in range(1, probe.max_exponent + 1):
        psi_r = psi.copy()
        psi_r[0] = 10.0 ** (-r)
        pt = FactorParams(lam, psi_r)
        seq.append(penalty_value(spec, pt, moments))
        min_eig = min(min_eig, float(np.linalg.eigvalsh(assemble_sigma(pt)).min()))
    strictly_decreasing = all(b < a for a, b in zip(seq, seq[1:]))
    divergence_ok = strictly_decreasing and seq[-1] < -1e6 and min_eig > 0.05

    return ConditionReport(
        family=spec.family,
        continuity_ok=continuity_ok,
        boundedness_ok=boundedness_ok,
        divergence_ok=divergence_ok,
        max_grid_value=max_grid_value,
        max_continuity_delta=float(max_delta),
        divergence_final_value=float(seq[-1]),
        min_sigma_eigenvalue=float(min_eig),
    )

"""Monte Carlo harness: experimental designs, replicated fits, and metrics.

Named loading settings use three factors with an item-to-factor ratio of
3, 5, or 8.  The "A" settings taper the nonzero loadings within each factor
block; the "B" settings use two strong blocks (0.8) and one weak block
(0.3).  Uniquenesses are set so the population covariance has unit
diagonal.  Error metrics target the unique elements of Lambda Lambda',
which are invariant to factor rotation, so replicates never need alignment.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from time import perf_counter

import numpy as np

from .estimation import FitOptions, fit
from .model import FactorParams, communalities, sample_moments
from .penalties import PenaltySpec
from .selection import _fit_grid

_TAPERED_BLOCKS = {
    3: (0.80, 0.65, 0.45),
    5: (0.80, 0.65, 0.50, 0.35, 0.20),
    8: (0.80, 0.70, 0.60, 0.50, 0.40, 0.30, 0.20, 0.10),
}
_STRONG_WEAK_BLOCKS = {
    ratio: ((0.80,) * ratio, (0.80,) * ratio, (0.30,) * ratio) for ratio in (3, 5, 8)
}
SETTING_NAMES = ("A3", "B3", "A5", "B5", "A8", "B8")


def _named_loadings(name: str) -> np.ndarray:
    ratio = int(name[1:])
    if name[0] == "A":
        blocks = (_TAPERED_BLOCKS[ratio],) * 3
    else:
        blocks = _STRONG_WEAK_BLOCKS[ratio]
    p = 3 * ratio
    lam = np.zeros((p, 3))
    for k, block in enumerate(blocks):
        lam[k * ratio : (k + 1) * ratio, k] = block
    return lam


@dataclass(frozen=True)
class LoadingSetting:
    """A population loading matrix with unit-diagonal implied covariance."""

    name: str
    loadings: np.ndarray

    def __post_init__(self):
        lam = np.array(self.loadings, dtype=float)
        lam.setflags(write=False)
        if lam.ndim != 2 or not 1 <= lam.shape[1] < lam.shape[0]:
            raise ValueError(f"invalid loading matrix shape {lam.shape}")
        if ((lam**2).sum(axis=1) >= 1.0).any():
            raise ValueError("implied uniquenesses must be positive (unit diagonal)")
        object.__setattr__(self, "loadings", lam)

    @classmethod
    def from_name(cls, name: str) -> "LoadingSetting":
        if name not in SETTING_NAMES:
            raise ValueError(f"unknown setting {name!r}; choose from {SETTING_NAMES}")
        return cls(name=name, loadings=_named_loadings(name))

    @classmethod
    def custom(cls, loadings) -> "LoadingSetting":
        return cls(name="custom", loadings=loadings)

    @property
    def p(self) -> int:
        return self.loadings.shape[0]

    @property
    def q(self) -> int:
        return self.loadings.shape[1]

    @property
    def uniquenesses(self) -> np.ndarray:
        return 1.0 - (self.loadings**2).sum(axis=1)

    @property
    def sigma(self) -> np.ndarray:
        lam = self.loadings
        return lam @ lam.T + np.diag(self.uniquenesses)

    def params(self) -> FactorParams:
        return FactorParams(self.loadings, self.uniquenesses)


@dataclass(frozen=True)
class SimulationConfig:
    """Design of one study: setting, sample size, estimators, q, replication.

    ``q_fit`` is either a single q (estimation study) or a grid of q values
    (model-selection study).  Replicate r always draws from the substream
    (seed, r), so results do not depend on execution order or partitioning.
    """

    setting: LoadingSetting
    n: int
    estimators: tuple
    q_fit: object = 3
    replicates: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.replicates < 1:
            raise ValueError("n and replicates must be positive")
        estimators = tuple(self.estimators)
        if not estimators:
            raise ValueError("at least one estimator is required")
        for spec in estimators:
            if not isinstance(spec, PenaltySpec):
                raise ValueError("estimators must be PenaltySpec instances")
        object.__setattr__(self, "estimators", estimators)
        if isinstance(self.q_fit, (int, np.integer)):
            object.__setattr__(self, "q_fit", int(self.q_fit))
        else:
            grid = tuple(sorted(set(int(q) for q in self.q_fit)))
            if not grid:
                raise ValueError("q grid must not be empty")
            object.__setattr__(self, "q_fit", grid)

    @property
    def is_selection_study(self) -> bool:
        return isinstance(self.q_fit, tuple)


@dataclass(frozen=True)
class ReplicateRecord:
    """Flat per-replicate outcome for one estimator, for external plotting."""

    replicate: int
    estimator: str
    heywood_flagged: bool
    reasons: tuple
    min_psi: float
    loglik: float
    converged: bool
    best_aic: int | None = None
    best_bic: int | None = None


@dataclass(frozen=True)
class EstimatorReport:
    """Aggregated metrics for one estimator within a study."""

    label: str
    spec: PenaltySpec
    heywood_percent: float
    n_flagged: int
    n_used: int
    bias: np.ndarray | None
    rmse: np.ndarray | None
    underestimation: np.ndarray | None
    selection_rates: dict | None


@dataclass(frozen=True)
class StudyReport:
    """Aggregated study output plus per-replicate rows and run metadata."""

    config: SimulationConfig
    truth: np.ndarray
    estimators: tuple
    rows: tuple
    total_fits: int
    elapsed_seconds: float = field(compare=False, default=0.0)


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    """Independent, order-insensitive RNG substream for one replicate."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(replicate,)))


def generate_data(setting: LoadingSetting, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n i.i.d. rows from N(0, Sigma) via the Cholesky factor of Sigma."""
    lower = np.linalg.cholesky(setting.sigma)
    z = rng.standard_normal((n, setting.p))
    return z @ lower.T


def unique_elements(matrix: np.ndarray) -> np.ndarray:
    """Upper triangle (including diagonal) in fixed row-major order."""
    iu = np.triu_indices(matrix.shape[0])
    return matrix[iu]


def _replicate_outcome(config: SimulationConfig, opts: FitOptions, replicate: int):
    """Fit every estimator on one simulated sample; returns plain records."""
    rng = replicate_rng(config.seed, replicate)
    data = generate_data(config.setting, config.n, rng)
    moments = sample_moments(data)
    q_true = config.setting.q
    out = []
    for spec in config.estimators:
        best_aic = best_bic = None
        if config.is_selection_study:
            selection, fits = _fit_grid(moments, config.q_fit, spec, opts)
            best_aic, best_bic = selection.best_aic, selection.best_bic
            result = fits.get(q_true)
            n_fits = len(config.q_fit)
        else:
            result = fit(moments, config.q_fit, spec, opts)
            n_fits = 1
        if result is not None:
            lam = result.params.loadings
            unique = unique_elements(lam @ lam.T)
            flagged = result.heywood.flagged
            record = ReplicateRecord(
                replicate=replicate,
                estimator=spec.label,
                heywood_flagged=flagged,
                reasons=tuple(sorted(result.heywood.reasons)),
                min_psi=result.heywood.min_psi,
                loglik=result.loglik,
                converged=result.converged,
                best_aic=best_aic,
                best_bic=best_bic,
            )
        else:
            unique = None
            record = ReplicateRecord(
                replicate=replicate,
                estimator=spec.label,
                heywood_flagged=False,
                reasons=(),
                min_psi=float("nan"),
                loglik=float("nan"),
                converged=False,
                best_aic=best_aic,
                best_bic=best_bic,
            )
        out.append((record, unique, n_fits))
    return out


def run_study(
    config: SimulationConfig,
    opts: FitOptions = FitOptions(),
    workers: int = 1,
) -> StudyReport:
    """Run the replicated experiment described by ``config``.

    Error metrics (bias, RMSE, probability of underestimation of the unique
    elements of Lambda Lambda') are computed over replicates not flagged as
    Heywood cases; selection rates use every replicate.  Aggregation reduces
    per-replicate results in replicate order, so reports are identical for
    any worker count.
    """
    start_time = perf_counter()
    reps = config.replicates
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_replicate = list(
                pool.map(
                    _replicate_worker,
                    ((config, opts, r) for r in range(reps)),
                    chunksize=max(1, reps // (8 * workers)),
                )
            )
    else:
        per_replicate = [_replicate_outcome(config, opts, r) for r in range(reps)]

    truth_lam = config.setting.loadings
    truth = unique_elements(truth_lam @ truth_lam.T)
    reports = []
    rows = []
    total_fits = 0
    for idx, spec in enumerate(config.estimators):
        records = [per_replicate[r][idx][0] for r in range(reps)]
        uniques = [per_replicate[r][idx][1] for r in range(reps)]
        total_fits += sum(per_replicate[r][idx][2] for r in range(reps))
        rows.extend(records)
        flagged = np.array([rec.heywood_flagged for rec in records])
        n_flagged = int(flagged.sum())
        have_params = [
            (rec, unique)
            for rec, unique in zip(records, uniques)
            if unique is not None and not rec.heywood_flagged
        ]
        if have_params:
            estimates = np.vstack([unique for _, unique in have_params])
            errors = estimates - truth
            bias = errors.mean(axis=0)
            rmse = np.sqrt((errors**2).mean(axis=0))
            underestimation = (estimates < truth).mean(axis=0)
            n_used = len(have_params)
        else:
            bias = rmse = underestimation = None
            n_used = 0
        if config.is_selection_study:
            selection_rates = {"aic": {}, "bic": {}}
            for criterion in ("aic", "bic"):
                chosen = [getattr(rec, f"best_{criterion}") for rec in records]
                for q in config.q_fit:
                    selection_rates[criterion][q] = 100.0 * sum(
                        1 for c in chosen if c == q
                    ) / reps
        else:
            selection_rates = None
        reports.append(
            EstimatorReport(
                label=spec.label,
                spec=spec,
                heywood_percent=100.0 * n_flagged / reps,
                n_flagged=n_flagged,
                n_used=n_used,
                bias=bias,
                rmse=rmse,
                underestimation=underestimation,
                selection_rates=selection_rates,
            )
        )
    return StudyReport(
        config=config,
        truth=truth,
        estimators=tuple(reports),
        rows=tuple(rows),
        total_fits=total_fits,
        elapsed_seconds=perf_counter() - start_time,
    )


def _replicate_worker(args):
    return _replicate_outcome(*args)


@dataclass(frozen=True)
class ComparisonRow:
    """Element-wise metric differences between two matched estimators."""

    label_a: str
    label_b: str
    bias_diff: np.ndarray | None
    rmse_diff: np.ndarray | None
    underestimation_diff: np.ndarray | None
    mean_abs_bias_a: float
    mean_abs_bias_b: float
    mean_underestimation_a: float
    mean_underestimation_b: float


@dataclass(frozen=True)
class ComparisonTable:
    rows: tuple


def compare_estimators(report_a: StudyReport, report_b: StudyReport) -> ComparisonTable:
    """Pair estimators of two studies (by position) and difference metrics.

    Both studies must share the same setting, sample size, and number of
    estimators.
    """
    cfg_a, cfg_b = report_a.config, report_b.config
    if cfg_a.setting.name != cfg_b.setting.name or cfg_a.n != cfg_b.n:
        raise ValueError("reports do not share a setting and sample size")
    if len(report_a.estimators) != len(report_b.estimators):
        raise ValueError("reports have different estimator counts")
    if report_a.truth.shape != report_b.truth.shape:
        raise ValueError("reports have mismatched metric dimensions")
    rows = []
    for est_a, est_b in zip(report_a.estimators, report_b.estimators):
        have_metrics = est_a.bias is not None and est_b.bias is not None
        rows.append(
            ComparisonRow(
                label_a=est_a.label,
                label_b=est_b.label,
                bias_diff=(est_a.bias - est_b.bias) if have_metrics else None,
                rmse_diff=(est_a.rmse - est_b.rmse) if have_metrics else None,
                underestimation_diff=(
                    est_a.underestimation - est_b.underestimation
                )
                if have_metrics
                else None,
                mean_abs_bias_a=float(np.abs(est_a.bias).mean())
                if est_a.bias is not None
                else float("nan"),
                mean_abs_bias_b=float(np.abs(est_b.bias).mean())
                if est_b.bias is not None
                else float("nan"),
                mean_underestimation_a=float(est_a.underestimation.mean())
                if est_a.underestimation is not None
                else float("nan"),
                mean_underestimation_b=float(est_b.underestimation.mean())
                if est_b.underestimation is not None
                else float("nan"),
            )
        )
    return ComparisonTable(rows=tuple(rows))

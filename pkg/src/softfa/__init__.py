"""Heywood-free exploratory factor analysis via softly penalised likelihood.

The package fits the normal linear factor model by maximum likelihood, by
maximum penalised likelihood, and by maximum softly penalised likelihood
(penalties scaled to vanish at the n^(-1/2) information rate), selects the
number of factors by AIC/BIC, and ships a reproducible Monte Carlo harness
for Heywood-case and model-selection experiments.
"""

__version__ = "0.1.0"

from ._linalg import NotPositiveDefiniteError
from .estimation import (
    FitOptions,
    FitResult,
    HeywoodDiagnosis,
    IterationCounts,
    NewtonResult,
    em_step,
    fit,
    heywood_diagnose,
    newton_refine,
    principal_axis_start,
)
from .model import (
    FactorParams,
    GradientVector,
    SampleMoments,
    assemble_sigma,
    communalities,
    discrepancy,
    log_likelihood,
    sample_moments,
    score,
)
from .penalties import (
    ConditionReport,
    PenaltySpec,
    ProbeConfig,
    effective_rho,
    penalty_gradient,
    penalty_value,
    verify_existence_conditions,
)
from .selection import (
    SelectionResult,
    SelectionRow,
    free_parameter_count,
    information_criteria,
    select_q,
)
from .simulation import (
    ComparisonTable,
    EstimatorReport,
    LoadingSetting,
    ReplicateRecord,
    SimulationConfig,
    StudyReport,
    compare_estimators,
    generate_data,
    replicate_rng,
    run_study,
    unique_elements,
)

__all__ = [
    "NotPositiveDefiniteError",
    "FactorParams",
    "GradientVector",
    "SampleMoments",
    "assemble_sigma",
    "communalities",
    "discrepancy",
    "log_likelihood",
    "sample_moments",
    "score",
    "ConditionReport",
    "PenaltySpec",
    "ProbeConfig",
    "effective_rho",
    "penalty_gradient",
    "penalty_value",
    "verify_existence_conditions",
    "FitOptions",
    "FitResult",
    "HeywoodDiagnosis",
    "IterationCounts",
    "NewtonResult",
    "em_step",
    "fit",
    "heywood_diagnose",
    "newton_refine",
    "principal_axis_start",
    "SelectionResult",
    "SelectionRow",
    "free_parameter_count",
    "information_criteria",
    "select_q",
    "ComparisonTable",
    "EstimatorReport",
    "LoadingSetting",
    "ReplicateRecord",
    "SimulationConfig",
    "StudyReport",
    "compare_estimators",
    "generate_data",
    "replicate_rng",
    "run_study",
    "unique_elements",
    "__version__",
]

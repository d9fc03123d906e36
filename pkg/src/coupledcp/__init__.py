"""AO-ADMM for regularized, linearly coupled matrix and tensor factorizations."""

from .coupling import Coupling
from .losses import Loss
from .metrics import factor_match_score, failure_threshold
from .prox import Regularizer, apply_prox, eval_regularizer
from .solver import (
    FitResult,
    Problem,
    SolverOptions,
    TraceRecord,
    evaluate_objective,
    fit,
    normalized,
)
from .synth import SynthSpec, build_problem, experiment_spec

__version__ = "0.1.0"

__all__ = [
    "Coupling",
    "FitResult",
    "Loss",
    "Problem",
    "Regularizer",
    "SolverOptions",
    "SynthSpec",
    "TraceRecord",
    "apply_prox",
    "build_problem",
    "eval_regularizer",
    "evaluate_objective",
    "experiment_spec",
    "factor_match_score",
    "failure_threshold",
    "fit",
    "normalized",
]

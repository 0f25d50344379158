"""Reconstruction of directed flow matrices from their row and column sums.

The package predicts the interior of a non-negative matrix with an empty
diagonal when only its margins are observed. Estimators range from the
maximum-entropy fit (:func:`fit_ipfp`) over log-linear regressions with
dyadic covariates (:func:`fit_constrained_ml`) and random sender/receiver
effects (:func:`fit_random_effects`) to a set of classical baselines.
"""

from netrecon.core import (
    ErrorReport,
    FlowMatrix,
    InfeasibleMarginsError,
    MarginSystem,
    NodeSet,
    ReducedProblem,
    RoutingMatrix,
    apply_margins,
    build_routing_matrix,
    error_metrics,
    reduce_problem,
    summarize_errors,
)
from netrecon.ipfp import FitResult, IpfpConfig, fit_ipfp, ipfp_loglik
from netrecon.regression import (
    AugLagState,
    Covariate,
    DesignMatrices,
    ModelSpec,
    Theta,
    auglag_solve,
    build_design,
    fit_constrained_ml,
    initialize_theta,
    predict,
    q_function,
)
from netrecon.raneff import (
    VarianceComponents,
    fit_random_effects,
    penalized_q,
    reml_variance,
)
from netrecon.uncertainty import bootstrap, intervals, simulate_exponential

__version__ = "0.1.0"

__all__ = [
    "AugLagState",
    "Covariate",
    "DesignMatrices",
    "ErrorReport",
    "FitResult",
    "FlowMatrix",
    "InfeasibleMarginsError",
    "IpfpConfig",
    "MarginSystem",
    "ModelSpec",
    "NodeSet",
    "ReducedProblem",
    "RoutingMatrix",
    "Theta",
    "VarianceComponents",
    "apply_margins",
    "auglag_solve",
    "bootstrap",
    "build_design",
    "build_routing_matrix",
    "error_metrics",
    "fit_constrained_ml",
    "fit_ipfp",
    "fit_random_effects",
    "initialize_theta",
    "intervals",
    "ipfp_loglik",
    "penalized_q",
    "predict",
    "q_function",
    "reduce_problem",
    "reml_variance",
    "simulate_exponential",
    "summarize_errors",
]

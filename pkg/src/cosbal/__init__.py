"""Approximate balancing weights for clustered observational studies."""

from .balancer import BalanceSpec, Mode, WeightSolution, fit, kish_ess
from .data import CosDataset, DatasetError
from .diagnostics import standardized_differences, weight_summary
from .estimator import EffectEstimate, Estimand, estimate
from .hyperparams import HyperParams, heuristic_hyperparams
from .ingest import SchemaConfig, load_dataset
from .qp import QpProblem, solve
from .simulator import SimConfig, SimResult, run_study
from .transform import FeatureSpec, build_features

__version__ = "0.1.0"

__all__ = [
    "BalanceSpec", "CosDataset", "DatasetError", "EffectEstimate", "Estimand", "FeatureSpec", "HyperParams",
    "Mode", "QpProblem", "SchemaConfig", "SimConfig", "SimResult", "WeightSolution", "build_features",
    "estimate", "fit", "heuristic_hyperparams", "kish_ess", "load_dataset", "run_study", "solve",
    "standardized_differences", "weight_summary",
]

"""Datasets, models and gradient oracles realizing the local losses ``f_i``."""
from .data import Dataset, DatasetShard, ParseError, dump_libsvm, load_libsvm, parse_libsvm, synth_classification
from .federated import (
    FederatedProblem,
    estimate_L,
    federated_from_dataset,
    full_grad,
    objective_phi,
    quadratic_problem,
    stochastic_grad,
    synth_quadratic,
)
from .models import MLP, ConvergenceError, LeastSquares, Logistic, Model, SmoothnessEstimate, make_model, power_iteration

__all__ = [
    "ConvergenceError",
    "Dataset",
    "DatasetShard",
    "FederatedProblem",
    "LeastSquares",
    "Logistic",
    "MLP",
    "Model",
    "ParseError",
    "SmoothnessEstimate",
    "dump_libsvm",
    "estimate_L",
    "federated_from_dataset",
    "full_grad",
    "load_libsvm",
    "make_model",
    "objective_phi",
    "parse_libsvm",
    "power_iteration",
    "quadratic_problem",
    "stochastic_grad",
    "synth_classification",
    "synth_quadratic",
]

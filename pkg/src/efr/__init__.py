"""Routing-problem toolkit: instance generation, library-file parsing, exact
and heuristic baselines, an edge-input transformer policy with REINFORCE
training, and an evaluation harness with JSON-lines reports and figures."""

__version__ = "0.1.0"

from .errors import (CheckpointError, ConfigurationError, DataError,
                     FeasibilityError, ParseError, TrainingError)
from .instances import (Distribution, ProblemInstance, ProblemKind, Solution,
                        SolveReport, SparseGraph, capacity_for_customers,
                        generate_atsp_instance, generate_instance,
                        knn_sparsify, normalize_cvrp_route, optimality_gap,
                        pairwise_euclid, solution_length, validate_route)

__all__ = [
    "__version__",
    "CheckpointError", "ConfigurationError", "DataError", "FeasibilityError",
    "ParseError", "TrainingError",
    "Distribution", "ProblemInstance", "ProblemKind", "Solution",
    "SolveReport", "SparseGraph", "capacity_for_customers",
    "generate_atsp_instance", "generate_instance", "knn_sparsify",
    "normalize_cvrp_route", "optimality_gap", "pairwise_euclid",
    "solution_length", "validate_route",
]

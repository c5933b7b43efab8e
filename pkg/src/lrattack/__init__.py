"""Minimal L2 adversarial perturbations for piecewise-linear networks."""

from .attack import AttackConfig, AttackResult, attack_point, find_starting_points, trace_statistics
from .errors import AttackError, ConfigError, NumericError
from .io import load_dataset, load_model, read_records, save_dataset, save_model
from .net import Network, forward, pattern_at
from .oracle import dense_materialize, exact_min_perturbation, reference_qp
from .qpsolve import QpConfig, solve_qp
from .region import Decision, build_region

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackResult", "attack_point", "find_starting_points", "trace_statistics",
    "AttackError", "ConfigError", "NumericError",
    "load_dataset", "load_model", "read_records", "save_dataset", "save_model",
    "Network", "forward", "pattern_at",
    "dense_materialize", "exact_min_perturbation", "reference_qp",
    "QpConfig", "solve_qp", "Decision", "build_region",
]

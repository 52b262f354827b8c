"""Constraint-aware hypergraph policies for capacitated vehicle routing.

The package trains an attention policy whose encoder groups customers
into constraint-induced hyperedges (learned sparse selection, capacity
and proximity aware) and whose decoder builds routes with a pair of
clipped pointers — one anchored at the current position, one at the
visit history.  Training is policy-gradient with a greedy self-critic
baseline that is replaced only on a significant paired t-test win.

Classical baselines (nearest neighbor, savings merge), an exhaustive
small-instance oracle, instance generation and file round-tripping,
and a command line (``generate``, ``train``, ``eval``, ``sweep``) round
out the toolkit.
"""

__version__ = "0.1.0"

from .encoder import ModelConfig, encode_batch, encode_one
from .heuristics import (
    ORACLE_MAX_N,
    clarke_wright,
    exact_oracle,
    gap_table,
    nearest_neighbor,
)
from .instances import (
    Instance,
    generate_instance,
    load_instance_dir,
    parse_instance_file,
    write_instance_file,
)
from .routes import Solution, solution_cost, validate_solution
from .training import (
    Model,
    TrainConfig,
    TrainResult,
    best_of_k,
    build_model,
    greedy_costs,
    load_model,
    train,
)

__all__ = [
    "Instance",
    "Model",
    "ModelConfig",
    "ORACLE_MAX_N",
    "Solution",
    "TrainConfig",
    "TrainResult",
    "__version__",
    "best_of_k",
    "build_model",
    "clarke_wright",
    "encode_batch",
    "encode_one",
    "exact_oracle",
    "gap_table",
    "generate_instance",
    "greedy_costs",
    "load_instance_dir",
    "load_model",
    "nearest_neighbor",
    "parse_instance_file",
    "solution_cost",
    "train",
    "validate_solution",
    "write_instance_file",
]

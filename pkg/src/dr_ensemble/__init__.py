"""Decentralized ensemble control of demand-response loads.

Units are finite-state Markov loads whose deviation from a default transition
matrix is priced by a KL-divergence discomfort term. The package provides the
closed-form consensus policies, a gossip-based distributed projected gradient
negotiation, a Monte Carlo ensemble simulator and the data pipeline feeding
them.
"""

from dr_ensemble.core import (
    DivergenceUndefinedError,
    InvalidArgumentError,
    Tolerance,
    kl_divergence,
    log_sum_exp,
    project_to_interior_simplex,
    project_to_simplex,
    validate_stochastic,
)
from dr_ensemble.solver import (
    StageCosts,
    UnitProfile,
    ValueTable,
    backward_recursion_consensus,
    local_stage_solve,
    prior_aggregates,
    solve_myopic_posterior,
    solve_myopic_prior,
    solve_trivial,
    unit_value_table,
)

__version__ = "0.1.0"

__all__ = [
    "DivergenceUndefinedError",
    "InvalidArgumentError",
    "StageCosts",
    "Tolerance",
    "UnitProfile",
    "ValueTable",
    "backward_recursion_consensus",
    "kl_divergence",
    "local_stage_solve",
    "log_sum_exp",
    "prior_aggregates",
    "project_to_interior_simplex",
    "project_to_simplex",
    "solve_myopic_posterior",
    "solve_myopic_prior",
    "solve_trivial",
    "unit_value_table",
    "validate_stochastic",
]

"""Stochastic MPC with multi-modal, interaction-aware target-vehicle predictions."""

from .estimation import GammaBelief, ModeBelief, mode_likelihood, mode_posterior_update, weight_kf_update
from .models import ContractError, LongitudinalParams, ScenarioInstance, longitudinal_instance
from .sim import ScenarioConfig, batch_grid, evaluate_success, run_closed_loop
from .smpc import PolicyParams, assemble_and_solve, extract_control, normal_quantile, plan

__version__ = "0.1.0"

__all__ = [
    "ContractError", "GammaBelief", "LongitudinalParams", "ModeBelief", "PolicyParams", "ScenarioConfig",
    "ScenarioInstance", "assemble_and_solve", "batch_grid", "evaluate_success", "extract_control",
    "longitudinal_instance", "mode_likelihood", "mode_posterior_update", "normal_quantile", "plan",
    "run_closed_loop", "weight_kf_update",
]

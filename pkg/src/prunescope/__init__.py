"""prunescope: component-aware structured pruning on small dense networks.

Train a multi-component network with exact reverse-mode gradients, watch
three group-importance metrics evolve online under a phase-offset cyclic L1
schedule, then remove the least important units with their full dependency
closure so the smaller network stays consistent.
"""

from .errors import (ConfigurationError, DataFormatError, InfeasiblePlanError,
                     NumericsError, PrunescopeError)
from .importance import (BayesConfig, GroupImportanceState, bayes_importance,
                         bayes_update, ema_update, fisher_diag, grad_magnitude,
                         group_energy, init_states, metric_scores, rank_groups,
                         states_from_doc, states_to_doc, update_all)
from .modelgraph import (ComponentGraph, MemberSlice, PruningGroup,
                         build_groups, dependency_closure, export_manifest,
                         group_tensors, prunable_units)
from .netcore import (Adam, DenseLayer, Network, ParamTensor, SGD,
                      add_l1_subgradient, apply_activation, backward,
                      build_sequential, fd_gradient, forward, load_checkpoint,
                      mse_loss, save_checkpoint)
from .pruner import (PrunePlan, allocate_budget, apply_prune,
                     importance_weights, rank_units_within_group,
                     verify_consistency)
from .scheduler import (ScheduleConfig, group_l1_norm, l1_term,
                        lambda_coefficient, lambda_weight_at, make_l1_penalty,
                        phase_offset, schedule_row, total_loss)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "DataFormatError", "InfeasiblePlanError",
    "NumericsError", "PrunescopeError",
    "BayesConfig", "GroupImportanceState", "bayes_importance", "bayes_update",
    "ema_update", "fisher_diag", "grad_magnitude", "group_energy",
    "init_states", "metric_scores", "rank_groups", "states_from_doc",
    "states_to_doc", "update_all",
    "ComponentGraph", "MemberSlice", "PruningGroup", "build_groups",
    "dependency_closure", "export_manifest", "group_tensors", "prunable_units",
    "Adam", "DenseLayer", "Network", "ParamTensor", "SGD",
    "add_l1_subgradient", "apply_activation", "backward", "build_sequential",
    "fd_gradient", "forward", "load_checkpoint", "mse_loss", "save_checkpoint",
    "PrunePlan", "allocate_budget", "apply_prune", "importance_weights",
    "rank_units_within_group", "verify_consistency",
    "ScheduleConfig", "group_l1_norm", "l1_term", "lambda_coefficient",
    "lambda_weight_at", "make_l1_penalty", "phase_offset", "schedule_row",
    "total_loss",
    "__version__",
]

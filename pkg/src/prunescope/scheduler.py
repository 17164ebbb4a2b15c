"""Phase-offset cosine schedule for per-group L1 pressure.

Group i of n receives the size-normalized coefficient

    lambda_i(t) = S(t, i) / sqrt(N_i),
    S(t, i) = lambda_min + (lambda_max - lambda_min) * (1 + cos(2 pi (t + phi_i) / T)) / 2,
    phi_i = (i / n) * T,

where t is the epoch counter and N_i the group's parameter count. The
implementation evaluates S as a convex combination of the endpoints and
reduces t modulo T first, so S hits lambda_min / lambda_max exactly and is
exactly periodic in t. The total objective is
``task + lambda_weight * sum_i lambda_i(t) * |theta_i|_1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, NumericsError
from .modelgraph import ComponentGraph, PruningGroup, group_tensors
from .netcore import Network


@dataclass(frozen=True)
class ScheduleConfig:
    """Schedule constants. lambda_min / lambda_max default to 0.1x and 2.0x
    the base coefficient; ``warmup_epochs = 0`` disables the loss-weight
    ramp (when enabled, the weight rises linearly from 0 to ``lambda_weight``
    over that many epochs)."""

    lambda_base: float = 1e-5
    lambda_min: float | None = None
    lambda_max: float | None = None
    cycle_T: int = 20
    n_groups: int = 1
    lambda_weight: float = 1.0
    warmup_epochs: int = 0

    def __post_init__(self) -> None:
        if not self.lambda_base > 0:
            raise ConfigurationError("lambda_base must be positive")
        if self.lambda_min is None:
            object.__setattr__(self, "lambda_min", 0.1 * self.lambda_base)
        if self.lambda_max is None:
            object.__setattr__(self, "lambda_max", 2.0 * self.lambda_base)
        if not 0 <= self.lambda_min <= self.lambda_max:
            raise ConfigurationError(
                f"need 0 <= lambda_min <= lambda_max, got "
                f"[{self.lambda_min}, {self.lambda_max}]")
        if int(self.cycle_T) < 1:
            raise ConfigurationError("cycle_T must be at least 1")
        object.__setattr__(self, "cycle_T", int(self.cycle_T))
        if int(self.n_groups) < 1:
            raise ConfigurationError("n_groups must be at least 1")
        object.__setattr__(self, "n_groups", int(self.n_groups))
        if self.lambda_weight < 0:
            raise ConfigurationError("lambda_weight must be non-negative")
        if int(self.warmup_epochs) < 0:
            raise ConfigurationError("warmup_epochs must be non-negative")
        object.__setattr__(self, "warmup_epochs", int(self.warmup_epochs))

    def with_groups(self, n_groups: int) -> "ScheduleConfig":
        return replace(self, n_groups=n_groups)


def phase_offset(i: int, n_groups: int, cycle_T: int) -> float:
    """Evenly spread offsets over one cycle: phi_i = (i / n) * T."""
    if not 0 <= i < n_groups:
        raise ConfigurationError(f"group index {i} out of range [0, {n_groups})")
    return (i / n_groups) * cycle_T


def lambda_coefficient(t: int, i: int, n_params: int, cfg: ScheduleConfig) -> float:
    """The L1 coefficient for group i at epoch t, scaled by 1/sqrt(N_i)."""
    t = int(t)
    if t < 0:
        raise ConfigurationError(f"epoch counter must be non-negative, got {t}")
    if n_params < 1:
        raise ConfigurationError("group parameter count must be at least 1")
    phi = phase_offset(i, cfg.n_groups, cfg.cycle_T)
    # Integer reduction keeps the schedule exactly periodic in t.
    u = (t % cfg.cycle_T) + phi
    w = 0.5 * (1.0 + math.cos(math.tau * (u / cfg.cycle_T)))
    s = w * cfg.lambda_max + (1.0 - w) * cfg.lambda_min
    return s / math.sqrt(n_params)


def schedule_row(t: int, param_counts: Sequence[int],
                 cfg: ScheduleConfig) -> list[float]:
    """lambda_i(t) for every group, in group order."""
    if len(param_counts) != cfg.n_groups:
        raise ConfigurationError(
            f"{len(param_counts)} parameter counts for {cfg.n_groups} groups")
    return [lambda_coefficient(t, i, n, cfg) for i, n in enumerate(param_counts)]


def lambda_weight_at(epoch: int, cfg: ScheduleConfig) -> float:
    """The global loss weight at a 1-based epoch, honoring the warm-up ramp."""
    if epoch < 1:
        raise ConfigurationError(f"epoch must be >= 1, got {epoch}")
    if cfg.warmup_epochs <= 0:
        return cfg.lambda_weight
    ramp = min(1.0, (epoch - 1) / cfg.warmup_epochs)
    return cfg.lambda_weight * ramp


def group_l1_norm(net: Network, group: PruningGroup) -> float:
    """Sum of absolute parameter values over one group."""
    return sum(float(np.abs(t.values).sum()) for t in group_tensors(net, group))


def l1_term(net: Network, groups: Sequence[PruningGroup],
            lambdas: Sequence[float]) -> float:
    """The scheduled sparsity term: sum_i lambda_i * |theta_i|_1."""
    if len(groups) != len(lambdas):
        raise ConfigurationError(
            f"{len(groups)} groups but {len(lambdas)} coefficients")
    return sum(lam * group_l1_norm(net, g) for g, lam in zip(groups, lambdas))


def total_loss(task: float, l1: float, weight: float) -> float:
    """task + weight * l1, with a finiteness guard."""
    value = task + weight * l1
    if not math.isfinite(value):
        raise NumericsError(
            f"non-finite total loss (task={task}, l1={l1}, weight={weight})")
    return value


def make_l1_penalty(graph: ComponentGraph, lambdas: Sequence[float],
                    weight: float) -> Callable[[Network], float]:
    """A net -> penalty callable for finite-difference checks of the
    composite objective."""
    def penalty(net: Network) -> float:
        return weight * l1_term(net, graph.groups, lambdas)
    return penalty

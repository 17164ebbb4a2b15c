"""Dependency-consistent structured pruning.

A prune plan removes output units. Removing unit u of layer k excises row u
of that layer's weight, entry u of its bias, and column u of every
consumer's weight, so the network stays shape-consistent by construction.
Budgets are parameter-weighted: group removal fractions are proportional to
one minus the min-max-normalized smoothed importance, rescaled until the
exact number of excised parameters (overlaps counted once) meets the
target, with at most 90% of any group's units removed and protected groups
untouched.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, InfeasiblePlanError
from .importance import GroupImportanceState, metric_scores
from .modelgraph import (ComponentGraph, PruningGroup, build_groups,
                         dependency_closure, prunable_units)
from .netcore import DenseLayer, Network, ParamTensor

UNIT_CAP_FRACTION = 0.9

PLAN_FORMAT = "prunescope.plan"


@dataclass
class PrunePlan:
    """Units to remove, keyed by group id as (layer, unit) pairs."""

    target_sparsity: float
    ranking_used: str
    per_group: dict[str, list[tuple[int, int]]]
    predicted_removed: int

    def total_units(self) -> int:
        return sum(len(units) for units in self.per_group.values())

    def to_dict(self) -> dict:
        return {
            "format": PLAN_FORMAT,
            "version": 1,
            "target_sparsity": self.target_sparsity,
            "metric": self.ranking_used,
            "predicted_removed_params": self.predicted_removed,
            "groups": {
                gid: {"unit_count": len(units),
                      "units": [[layer, unit] for layer, unit in units]}
                for gid, units in sorted(self.per_group.items())
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PrunePlan":
        if not isinstance(doc, dict) or doc.get("format") != PLAN_FORMAT:
            raise ConfigurationError("not a prune-plan document")
        per_group = {}
        for gid, entry in doc["groups"].items():
            units = [(int(layer), int(unit)) for layer, unit in entry["units"]]
            if len(units) != int(entry.get("unit_count", len(units))):
                raise ConfigurationError(f"plan group {gid!r}: unit count mismatch")
            per_group[gid] = units
        return cls(float(doc["target_sparsity"]), str(doc["metric"]),
                   per_group, int(doc["predicted_removed_params"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "PrunePlan":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"plan {path} is not valid JSON: {exc}") from exc


def rank_units_within_group(
        group: PruningGroup, unit_scores: Mapping[int, np.ndarray],
        units: Sequence[tuple[int, int]] | None = None) -> list[tuple[int, int]]:
    """Order units by ascending score; ties break by (layer, unit index).

    ``unit_scores`` maps a unit layer to its per-output-unit score vector.
    ``units`` restricts the ranking (defaults to every scored unit of the
    group's unit layers).
    """
    if units is None:
        units = [(layer, u) for layer in group.unit_layers()
                 for u in range(len(np.asarray(unit_scores[layer])))]
    scored = []
    for layer, unit in units:
        if layer not in unit_scores:
            raise ConfigurationError(
                f"group {group.id!r}: no unit scores for layer {layer}")
        vec = np.asarray(unit_scores[layer], dtype=np.float64)
        if not 0 <= unit < len(vec):
            raise ConfigurationError(
                f"group {group.id!r}: unit {unit} out of range for layer {layer} "
                f"scores of length {len(vec)}")
        scored.append((float(vec[unit]), layer, unit))
    scored.sort()
    return [(layer, unit) for _, layer, unit in scored]


def importance_weights(states: Mapping[str, GroupImportanceState],
                       group_ids: Sequence[str], metric: str,
                       weights: Sequence[float] | None = None) -> dict[str, float]:
    """Pre-rescale allocation weights: 1 - minmax(smoothed importance).

    Monotone: raising a group's importance (others fixed) never raises its
    weight. Degenerate spreads (all equal) give every group weight 1.
    """
    scores = metric_scores(states, group_ids, metric, weights)
    values = [scores[gid] for gid in group_ids]
    lo, hi = min(values), max(values)
    if hi > lo:
        return {gid: 1.0 - (scores[gid] - lo) / (hi - lo) for gid in group_ids}
    return {gid: 1.0 for gid in group_ids}


class _RemovalLedger:
    """Exact incremental count of excised parameters, overlaps counted once."""

    def __init__(self, net: Network) -> None:
        self.net = net
        self.rows: dict[int, set[int]] = {}
        self.cols: dict[int, set[int]] = {}
        self.removed = 0

    def add_unit(self, layer: int, unit: int) -> int:
        """Account for removing one output unit; returns the marginal cost."""
        delta = 0
        rows = self.rows.setdefault(layer, set())
        if unit not in rows:
            cols = self.cols.get(layer, ())
            delta += self.net.layers[layer].in_dim - len(cols)  # weight row
            delta += 1  # bias entry
            rows.add(unit)
        for consumer in self.net.consumers(layer):
            ccols = self.cols.setdefault(consumer, set())
            if unit not in ccols:
                crows = self.rows.get(consumer, ())
                delta += self.net.layers[consumer].out_dim - len(crows)
                ccols.add(unit)
        self.removed += delta
        return delta


def predicted_removed_params(net: Network,
                             removals: Iterable[tuple[int, int]]) -> int:
    """Exact parameter count a set of (layer, unit) removals would excise."""
    ledger = _RemovalLedger(net)
    for layer, unit in removals:
        ledger.add_unit(layer, unit)
    return ledger.removed


def _unit_closure_size(net: Network, layer: int) -> int:
    """Parameters a single fresh unit removal excises on this layer."""
    return (net.layers[layer].in_dim + 1
            + sum(net.layers[c].out_dim for c in net.consumers(layer)))


def allocate_budget(states: Mapping[str, GroupImportanceState],
                    graph: ComponentGraph, net: Network,
                    target_sparsity: float, metric: str,
                    protect: Iterable[str] = (),
                    weights: Sequence[float] | None = None) -> PrunePlan:
    """Build a plan whose exact removed-parameter total lands within one
    unit's closure of ``target_sparsity * total_params``.

    Raises :class:`InfeasiblePlanError` when caps and protections make the
    target unreachable.
    """
    if not 0.0 < target_sparsity < 1.0:
        raise ConfigurationError(
            f"target sparsity must lie in (0, 1), got {target_sparsity}")
    protect = set(protect)
    known = set(graph.group_ids())
    unknown = protect - known
    if unknown:
        raise ConfigurationError(f"protected ids not in graph: {sorted(unknown)}")

    candidates: list[PruningGroup] = []
    units_of: dict[str, list[tuple[int, int]]] = {}
    for group in graph.groups:
        if group.id in protect:
            continue
        units = prunable_units(net, group)
        if units:
            candidates.append(group)
            units_of[group.id] = units
    if not candidates:
        raise InfeasiblePlanError("no unprotected group has prunable units")

    cand_ids = [g.id for g in candidates]
    alloc_weights = importance_weights(states, cand_ids, metric, weights)

    ordered: dict[str, list[tuple[int, int]]] = {}
    caps: dict[str, int] = {}
    for group in candidates:
        state = states.get(group.id)
        if state is None:
            raise ConfigurationError(f"no importance state for group {group.id!r}")
        ranking = rank_units_within_group(group, state.unit_ema, units_of[group.id])
        cap = math.floor(UNIT_CAP_FRACTION * len(ranking))
        ordered[group.id] = ranking[:cap]
        caps[group.id] = cap

    total = net.param_count()
    target = round(target_sparsity * total)
    granularity = max(_unit_closure_size(net, layer)
                      for gid in cand_ids for layer, _ in (units_of[gid] or [(0, 0)]))

    ledger = _RemovalLedger(net)
    taken: dict[str, list[tuple[int, int]]] = {gid: [] for gid in cand_ids}
    full_units = {gid: len(units_of[gid]) for gid in cand_ids}
    last: tuple[str, tuple[int, int], int] | None = None

    while ledger.removed < target:
        best = None
        for gid in cand_ids:
            share = alloc_weights[gid] * full_units[gid]
            if share <= 0 or len(taken[gid]) >= caps[gid]:
                continue
            progress = len(taken[gid]) / share
            if best is None or (progress, gid) < best[:2]:
                best = (progress, gid)
        if best is None:
            if target - ledger.removed > granularity:
                raise InfeasiblePlanError(
                    f"cannot reach {target} removed parameters: caps and "
                    f"protections allow only {ledger.removed}")
            break
        gid = best[1]
        unit = ordered[gid][len(taken[gid])]
        delta = ledger.add_unit(*unit)
        taken[gid].append(unit)
        last = (gid, unit, delta)

    removed = ledger.removed
    if last is not None and removed > target:
        without = removed - last[2]
        if abs(without - target) < abs(removed - target):
            taken[last[0]].pop()
            removed = without

    per_group = {gid: units for gid, units in taken.items() if units}
    predicted = predicted_removed_params(net, [u for units in per_group.values()
                                               for u in units])
    return PrunePlan(target_sparsity, metric, per_group, predicted)


def _validate_plan(net: Network, graph: ComponentGraph, plan: PrunePlan) -> None:
    sinks = set(net.sinks())
    for gid, units in plan.per_group.items():
        group = graph.get(gid)
        allowed_layers = set(group.unit_layers())
        seen = set()
        for layer, unit in units:
            if layer not in allowed_layers:
                raise ConfigurationError(
                    f"plan group {gid!r}: layer {layer} is not a unit layer of "
                    f"this group")
            if layer in sinks:
                raise ConfigurationError(
                    f"plan group {gid!r}: layer {layer} is a network output layer "
                    "and cannot be pruned")
            if not 0 <= unit < net.layers[layer].out_dim:
                raise ConfigurationError(
                    f"plan group {gid!r}: unit {unit} out of range for layer "
                    f"{layer}")
            if (layer, unit) in seen:
                raise ConfigurationError(
                    f"plan group {gid!r}: duplicate unit ({layer}, {unit})")
            seen.add((layer, unit))


def apply_prune(net: Network, graph: ComponentGraph,
                plan: PrunePlan) -> tuple[Network, ComponentGraph]:
    """Execute a plan, returning the smaller network and its rebuilt graph.

    The input network is left untouched. The exhaustive parameter recount
    must match the plan's predicted removal exactly.
    """
    _validate_plan(net, graph, plan)
    by_layer: dict[int, set[int]] = {}
    for units in plan.per_group.values():
        for layer, unit in units:
            by_layer.setdefault(layer, set()).add(unit)

    rows: dict[int, set[int]] = {k: set() for k in range(len(net.layers))}
    cols: dict[int, set[int]] = {k: set() for k in range(len(net.layers))}
    for layer, units in sorted(by_layer.items()):
        for closure in dependency_closure(net, layer, units):
            if closure.axis == "rows" or closure.axis == "elements":
                if closure.role == "weight" or closure.role == "bias":
                    rows[closure.layer].update(closure.indices)
            if closure.axis == "cols":
                cols[closure.layer].update(closure.indices)

    new_layers = []
    for k, layer in enumerate(net.layers):
        r = sorted(rows[k])
        c = sorted(cols[k])
        if len(r) >= layer.out_dim or len(c) >= layer.in_dim:
            raise ConfigurationError(
                f"plan degenerates layer {k}: it would lose all its "
                f"{'rows' if len(r) >= layer.out_dim else 'columns'}")
        w = np.delete(np.delete(layer.weight.values, r, axis=0), c, axis=1)
        b = np.delete(layer.bias.values, r)
        new_layers.append(DenseLayer(ParamTensor(layer.weight.name, w),
                                     ParamTensor(layer.bias.name, b),
                                     layer.activation))

    pruned = Network(new_layers, dict(net.components), list(net.layer_inputs))
    removed = net.param_count() - pruned.param_count()
    expected = predicted_removed_params(
        net, [u for units in plan.per_group.values() for u in units])
    if removed != expected:
        raise ConfigurationError(
            f"recount mismatch: removed {removed} parameters, closure math "
            f"predicted {expected}")
    if plan.predicted_removed != expected:
        raise ConfigurationError(
            f"plan predicts {plan.predicted_removed} removed parameters but this "
            f"network loses {expected}; the plan was built for a different network")
    return pruned, build_groups(pruned, graph.layers_per_group)


@dataclass
class ConsistencyReport:
    ok: bool
    problems: list[str]
    param_count: int
    layer_shapes: list[tuple[int, int]]

    def summary(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        lines = [f"consistency: {status} "
                 f"({len(self.layer_shapes)} layers, {self.param_count} parameters)"]
        lines += [f"  problem: {p}" for p in self.problems]
        return "\n".join(lines)


def verify_consistency(net: Network) -> ConsistencyReport:
    """Re-check shapes, wiring, component coverage, and finiteness.

    Works on the object as it stands, so damage done after construction
    (hand-edited arrays, truncated biases) is reported rather than raised.
    """
    problems: list[str] = []
    n = len(net.layers)
    if len(net.layer_inputs) != n:
        problems.append(
            f"layer_inputs has {len(net.layer_inputs)} entries for {n} layers")
    for k, layer in enumerate(net.layers):
        w = layer.weight.values
        b = layer.bias.values
        if w.ndim != 2:
            problems.append(f"layer {k}: weight is {w.ndim}-D, expected 2-D")
            continue
        if w.shape[0] < 1 or w.shape[1] < 1:
            problems.append(f"layer {k}: degenerate weight shape {w.shape}")
        if b.ndim != 1 or b.shape[0] != w.shape[0]:
            problems.append(
                f"layer {k}: bias length {b.shape} does not match weight rows "
                f"{w.shape[0]}")
        if layer.weight.grad.shape != w.shape:
            problems.append(f"layer {k}: weight grad shape mismatch")
        if layer.bias.grad.shape != b.shape:
            problems.append(f"layer {k}: bias grad shape mismatch")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            problems.append(f"layer {k}: non-finite parameter values")
        src = net.layer_inputs[k] if k < len(net.layer_inputs) else None
        if src is not None:
            if not -1 <= src < k:
                problems.append(f"layer {k}: invalid input source {src}")
            elif src >= 0 and w.shape[1] != net.layers[src].weight.values.shape[0]:
                problems.append(
                    f"layer {k}: input width {w.shape[1]} does not match layer "
                    f"{src} output width {net.layers[src].weight.values.shape[0]}")
    covered: list[int] = []
    for name, (lo, hi) in net.components.items():
        if not 0 <= lo < hi <= n:
            problems.append(f"component {name!r}: invalid range [{lo}, {hi})")
        covered.extend(range(lo, hi))
    if sorted(covered) != list(range(n)):
        problems.append("component ranges do not partition the layer list")
    shapes = [(layer.weight.values.shape[0], layer.weight.values.shape[1])
              if layer.weight.values.ndim == 2 else (-1, -1)
              for layer in net.layers]
    count = sum(layer.weight.values.size + layer.bias.values.size
                for layer in net.layers)
    return ConsistencyReport(not problems, problems, count, shapes)

"""Grouped expert execution over a static (G*C) x H buffer.

A group's experts share one capacity C. Routed tokens are packed into the
front of each expert's slice, the rest of the slice is zero, every slice
runs through its expert, and only the first n_g rows of each output slice
are scattered back, weighted by the gate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .capacity import CapacityPlan, prune_overflow
from .core import DTYPE, ExpertWeights, RoutingTable, as_tensor, ffn_forward
from .errors import ConfigError, InvariantError


@dataclass(frozen=True)
class ExpertGroup:
    expert_ids: tuple[int, ...]
    capacity: int

    def __post_init__(self):
        ids = tuple(int(e) for e in self.expert_ids)
        if not ids:
            raise ConfigError("expert group is empty")
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate experts in group {ids}")
        if self.capacity < 1:
            raise ConfigError("group capacity must be >= 1")
        object.__setattr__(self, "expert_ids", ids)

    @property
    def size(self) -> int:
        return len(self.expert_ids)

    @property
    def rows(self) -> int:
        return self.size * self.capacity


@dataclass
class PackedBatch:
    group: ExpertGroup
    buffer: np.ndarray                      # (G*C) x H
    origin: list[list[tuple[int, float]]]   # per slice: (token, gate) for packed rows
    dropped: list[list[int]] = field(default_factory=list)

    @property
    def occupancy(self) -> list[int]:
        return [len(o) for o in self.origin]

    @property
    def padded_rows(self) -> int:
        return self.group.rows - sum(self.occupancy)

    @property
    def packed_tokens(self) -> int:
        return sum(self.occupancy)

    @property
    def dropped_tokens(self) -> int:
        return sum(len(d) for d in self.dropped)


def _slice_tokens(routing: RoutingTable, expert: int):
    if expert < 0 or expert >= routing.num_experts:
        raise ConfigError(f"expert {expert} not present in routing table (E={routing.num_experts})")
    return routing.token_lists[expert], routing.weight_lists[expert]


def _fill(hidden: np.ndarray, group: ExpertGroup, per_slice) -> np.ndarray:
    cap = group.capacity
    buf = np.zeros((group.rows, hidden.shape[1]), dtype=DTYPE)
    for g, entries in enumerate(per_slice):
        if entries:
            rows = [t for t, _ in entries]
            buf[g * cap:g * cap + len(rows)] = hidden[rows]
    return buf


def pack(hidden, routing: RoutingTable, group: ExpertGroup, saliency) -> PackedBatch:
    """Pack one group, pruning the least salient tokens of any overflowing expert."""
    hidden = as_tensor(hidden)
    origin, dropped = [], []
    for expert in group.expert_ids:
        tokens, gates = _slice_tokens(routing, expert)
        gate_of = dict(zip(tokens.tolist(), gates.tolist()))
        kept, lost = prune_overflow(tokens, saliency, group.capacity)
        origin.append([(t, gate_of[t]) for t in kept])
        dropped.append(lost)
    return PackedBatch(group, _fill(hidden, group, origin), origin, dropped)


def pack_passes(hidden, routing: RoutingTable, group: ExpertGroup) -> list[PackedBatch]:
    """Pack without dropping: overflow spills into extra invocations of the same graph.

    Pass p holds tokens [p*C, (p+1)*C) of every member's ascending token list.
    A group with no routed tokens still yields one (all-padding) pass.
    """
    hidden = as_tensor(hidden)
    cap = group.capacity
    lists = []
    for expert in group.expert_ids:
        tokens, gates = _slice_tokens(routing, expert)
        lists.append(list(zip(tokens.tolist(), gates.tolist())))
    passes = max(1, max(-(-len(x) // cap) for x in lists))
    out = []
    for p in range(passes):
        origin = [x[p * cap:(p + 1) * cap] for x in lists]
        out.append(PackedBatch(group, _fill(hidden, group, origin), origin, [[] for _ in lists]))
    return out


def execute_group(batch: PackedBatch, experts: list[ExpertWeights]) -> np.ndarray:
    """Run each C-row slice through its own expert; slices stay in group order."""
    group = batch.group
    if len(experts) != group.size:
        raise ConfigError(f"group has {group.size} experts but {len(experts)} weight sets were given")
    cap = group.capacity
    width = batch.buffer.shape[1]
    out = np.empty_like(batch.buffer)
    for g, w in enumerate(experts):
        if w.hidden_dim != width:
            raise ConfigError(f"expert hidden dim {w.hidden_dim} != buffer width {width}")
        out[g * cap:(g + 1) * cap] = ffn_forward(batch.buffer[g * cap:(g + 1) * cap], w)
    return out


def weighted_scatter(output: np.ndarray, batch: PackedBatch, accum: np.ndarray) -> np.ndarray:
    """accum[token] += gate * output row, for packed rows only (in place; also returned)."""
    cap = batch.group.capacity
    num_tokens = accum.shape[0]
    for g, entries in enumerate(batch.origin):
        if not entries:
            continue
        tokens = np.fromiter((t for t, _ in entries), dtype=np.int64, count=len(entries))
        if tokens.min() < 0 or tokens.max() >= num_tokens:
            raise InvariantError(f"scatter target out of range in slice {g}")
        gates = np.fromiter((w for _, w in entries), dtype=DTYPE, count=len(entries))
        rows = output[g * cap:g * cap + len(entries)]
        np.add.at(accum, tokens, gates[:, None] * rows)
    return accum


@dataclass
class LayerExecStats:
    padded_rows: int = 0
    dropped_tokens: int = 0
    packed_tokens: int = 0
    launches: int = 0
    group_passes: list[int] = field(default_factory=list)
    group_occupancy: list[list[list[int]]] = field(default_factory=list)  # group -> pass -> slice
    dropped_by_token: dict[int, int] = field(default_factory=dict)


def check_partition(groups: list[ExpertGroup], num_experts: int) -> None:
    seen = [e for g in groups for e in g.expert_ids]
    if len(seen) != len(set(seen)):
        raise ConfigError("groups overlap")
    if sorted(seen) != list(range(num_experts)):
        missing = sorted(set(range(num_experts)) - set(seen))
        raise ConfigError(f"groups do not cover all experts; missing {missing}")


def grouped_moe_forward(hidden, routing: RoutingTable, groups: list[ExpertGroup],
                        experts: list[ExpertWeights], saliency=None,
                        policy: str = "prune") -> tuple[np.ndarray, LayerExecStats]:
    """Pack, execute and scatter every group; returns the layer output and its bookkeeping.

    ``policy="prune"`` runs each group once and drops overflow by saliency;
    ``policy="pad-only"`` never drops and re-invokes a group until all its
    tokens are processed.
    """
    hidden = as_tensor(hidden)
    check_partition(groups, routing.num_experts)
    if policy == "prune" and saliency is None:
        raise ConfigError("prune policy needs saliency scores")
    accum = np.zeros_like(hidden)
    stats = LayerExecStats()
    for group in groups:
        weights = [experts[e] for e in group.expert_ids]
        if policy == "prune":
            batches = [pack(hidden, routing, group, saliency)]
        elif policy == "pad-only":
            batches = pack_passes(hidden, routing, group)
        else:
            raise ConfigError(f"unknown overflow policy {policy!r}")
        for batch in batches:
            weighted_scatter(execute_group(batch, weights), batch, accum)
            stats.padded_rows += batch.padded_rows
            stats.packed_tokens += batch.packed_tokens
            stats.dropped_tokens += batch.dropped_tokens
            for lost in batch.dropped:
                for t in lost:
                    stats.dropped_by_token[t] = stats.dropped_by_token.get(t, 0) + 1
        stats.launches += len(batches)
        stats.group_passes.append(len(batches))
        stats.group_occupancy.append([b.occupancy for b in batches])
    expected = routing.num_tokens * routing.top_k
    if stats.packed_tokens + stats.dropped_tokens != expected:
        raise InvariantError(
            f"token accounting broken: packed {stats.packed_tokens} + dropped {stats.dropped_tokens} != {expected}")
    return accum, stats


def groups_from_plan(plan: CapacityPlan, layer: int, group_size: int,
                     order=None) -> list[ExpertGroup]:
    """Chunk experts (id order unless ``order`` given) into groups at the max member capacity."""
    if group_size < 1:
        raise ConfigError("group size must be >= 1")
    ids = list(range(plan.capacities.shape[1])) if order is None else [int(e) for e in order]
    groups = []
    for i in range(0, len(ids), group_size):
        members = ids[i:i + group_size]
        groups.append(ExpertGroup(tuple(members), max(plan.capacity(layer, e) for e in members)))
    return groups

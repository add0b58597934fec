"""Static per-expert capacities (tiers) and the overflow policy."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .calibration import CalibrationProfile
from .errors import ConfigError

ALIGN = 16
OVERFLOW_POLICIES = ("prune", "pad-only")


def align_up(n: float, multiple: int = ALIGN) -> int:
    """Round up to a positive multiple of ``multiple``."""
    units = max(1, math.ceil(n / multiple - 1e-9))
    return units * multiple


def base_capacity(chunk_size: int, num_experts: int, top_k: int = 1) -> float:
    """Mean per-expert load of one chunk under balanced routing."""
    return chunk_size * top_k / num_experts


def estimate_max_load(chunk_size: int, num_experts: int, ratio: float, top_k: int = 1) -> int:
    """Busiest-expert load ``ratio * B * k / E``, ceiled and aligned to 16."""
    if chunk_size < 1 or num_experts < 1:
        raise ConfigError("chunk size and expert count must be >= 1")
    if ratio < 1:
        raise ConfigError(f"imbalance ratio must be >= 1, got {ratio}")
    return align_up(math.ceil(ratio * base_capacity(chunk_size, num_experts, top_k) - 1e-9))


@dataclass(frozen=True)
class TierSet:
    capacities: tuple[int, ...]  # strictly descending

    def __post_init__(self):
        caps = tuple(int(c) for c in self.capacities)
        if not caps:
            raise ConfigError("tier set is empty")
        if any(c <= 0 or c % ALIGN for c in caps):
            raise ConfigError(f"tiers must be positive multiples of {ALIGN}: {caps}")
        if any(a <= b for a, b in zip(caps, caps[1:])):
            raise ConfigError(f"tiers must be strictly descending: {caps}")
        object.__setattr__(self, "capacities", caps)

    @property
    def largest(self) -> int:
        return self.capacities[0]

    @property
    def smallest(self) -> int:
        return self.capacities[-1]

    def tier_for(self, load: float) -> int:
        """Smallest tier holding ``load``; the largest tier if none does."""
        for cap in reversed(self.capacities):
            if load <= cap:
                return cap
        return self.largest


def derive_tier_set(base: float, multipliers=(4, 2, 1)) -> TierSet:
    if base < 1:
        raise ConfigError(f"base capacity must be >= 1, got {base}")
    mults = list(multipliers)
    if not mults or any(m <= 0 for m in mults) or any(a <= b for a, b in zip(mults, mults[1:])):
        raise ConfigError(f"multipliers must be strictly descending positive numbers: {mults}")
    caps = []
    for m in mults:
        cap = align_up(m * base)
        if not caps or cap < caps[-1]:
            caps.append(cap)
    return TierSet(tuple(caps))


@dataclass(frozen=True)
class CapacityPlan:
    """Per-(layer, expert) capacities.

    ``expected_load`` keeps the per-chunk expectation each capacity was derived
    from; ``overflow_flag`` marks loads above the largest tier.
    """

    capacities: np.ndarray      # (L, E) int
    expected_load: np.ndarray   # (L, E) float
    chunk_size: int
    policy: str
    tiers: TierSet | None = None

    def __post_init__(self):
        if self.policy not in OVERFLOW_POLICIES:
            raise ConfigError(f"unknown overflow policy {self.policy!r}")
        caps = np.asarray(self.capacities, dtype=np.int64)
        if caps.ndim != 2 or np.any(caps < 1):
            raise ConfigError("capacities must be an (L, E) array of positive counts")
        object.__setattr__(self, "capacities", caps)
        object.__setattr__(self, "expected_load", np.asarray(self.expected_load, dtype=np.float64))

    @property
    def overflow_flag(self) -> np.ndarray:
        return self.expected_load > self.capacities

    def capacity(self, layer: int, expert: int) -> int:
        return int(self.capacities[layer, expert])

    def summary(self) -> dict:
        return {
            "chunk_size": self.chunk_size,
            "policy": self.policy,
            "tiers": list(self.tiers.capacities) if self.tiers else None,
            "capacities": self.capacities.tolist(),
            "overflow_flagged": int(self.overflow_flag.sum()),
        }


def expected_loads(profile: CalibrationProfile, chunk_size: int) -> np.ndarray:
    """Per-chunk expected tokens per expert: ``B * n_e / tokens_observed``.

    Equivalent to ``B * k * n_e / sum(n)``, i.e. the layer's traffic share
    scaled to the ``B * k`` routed slots of one chunk.
    """
    counts = profile.counts.astype(np.float64)
    totals = counts.sum(axis=1, keepdims=True)
    share = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    return share * chunk_size * profile.top_k


def assign_tiers(profile: CalibrationProfile, tiers: TierSet, chunk_size: int,
                 policy: str = "prune") -> CapacityPlan:
    if tiers is None or not tiers.capacities:
        raise ConfigError("empty tier set")
    loads = expected_loads(profile, chunk_size)
    caps = np.vectorize(tiers.tier_for, otypes=[np.int64])(loads) if loads.size else loads.astype(np.int64)
    return CapacityPlan(caps, loads, chunk_size, policy, tiers)


def uniform_plan(profile: CalibrationProfile, chunk_size: int, capacity: int | None = None,
                 policy: str = "prune") -> CapacityPlan:
    """Every expert of a layer gets the same capacity.

    With ``capacity=None`` each layer uses its busiest-expert estimate
    (padding everything to max load).
    """
    loads = expected_loads(profile, chunk_size)
    caps = np.empty_like(profile.counts)
    for layer in range(profile.num_layers):
        if capacity is None:
            caps[layer] = estimate_max_load(chunk_size, profile.num_experts,
                                            profile.imbalance(layer), profile.top_k)
        else:
            caps[layer] = capacity
    return CapacityPlan(caps, loads, chunk_size, policy, None)


def overflow(n: int, capacity: int) -> int:
    return max(0, n - capacity)


def prune_overflow(token_ids, saliency, capacity: int) -> tuple[list[int], list[int]]:
    """Keep the ``capacity`` most salient tokens.

    Ties keep the lower token index. Both returned lists are in ascending
    token order. ``saliency`` is indexed by token id.
    """
    token_ids = [int(t) for t in token_ids]
    if len(token_ids) <= capacity:
        return token_ids, []
    sal = np.asarray(saliency, dtype=np.float64)
    ids = np.asarray(token_ids)
    order = np.lexsort((ids, -sal[ids]))
    keep = set(ids[order[:capacity]].tolist())
    kept = sorted(t for t in token_ids if t in keep)
    dropped = sorted(t for t in token_ids if t not in keep)
    return kept, dropped


def padded_rows(counts: np.ndarray, capacities: np.ndarray) -> int:
    """Zero rows needed to fill each expert slice up to its capacity."""
    counts, capacities = np.asarray(counts), np.asarray(capacities)
    return int(np.sum(np.maximum(0, capacities - np.minimum(counts, capacities))))

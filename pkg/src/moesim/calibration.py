"""Offline routing statistics: per-layer expert counts, popularity, skew."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SchemaVersionError, ValidationError

PROFILE_VERSION = 1


@dataclass(frozen=True)
class RoutingTrace:
    """Selected expert ids (and gates) for every token at every layer.

    ``experts`` has shape (L, T, k). Chunks are contiguous token ranges of
    the prefill chunk size, so they are implicit in the token axis.
    """

    experts: np.ndarray
    weights: np.ndarray
    num_experts: int

    def __post_init__(self):
        experts = np.asarray(self.experts, dtype=np.int64)
        weights = np.asarray(self.weights, dtype=np.float32)
        if experts.ndim != 3 or experts.shape != weights.shape:
            raise ConfigError(f"trace arrays must be (L, T, k) and match, got {experts.shape} / {weights.shape}")
        if experts.size:
            if experts.min() < 0 or experts.max() >= self.num_experts:
                raise ConfigError("trace expert id out of range")
            srt = np.sort(experts, axis=2)
            if np.any(srt[..., 1:] == srt[..., :-1]):
                raise ConfigError("trace token record repeats an expert")
        object.__setattr__(self, "experts", experts)
        object.__setattr__(self, "weights", weights)

    @property
    def num_layers(self) -> int:
        return self.experts.shape[0]

    @property
    def num_tokens(self) -> int:
        return self.experts.shape[1]

    @property
    def top_k(self) -> int:
        return self.experts.shape[2]

    def slice_tokens(self, start: int, stop: int) -> "RoutingTrace":
        return RoutingTrace(self.experts[:, start:stop], self.weights[:, start:stop], self.num_experts)

    def layer_counts(self) -> np.ndarray:
        """(L, E) routed-token counts."""
        out = np.zeros((self.num_layers, self.num_experts), dtype=np.int64)
        for layer in range(self.num_layers):
            out[layer] = np.bincount(self.experts[layer].ravel(), minlength=self.num_experts)
        return out

    def __eq__(self, other):
        if not isinstance(other, RoutingTrace):
            return NotImplemented
        return (self.num_experts == other.num_experts
                and self.experts.shape == other.experts.shape
                and np.array_equal(self.experts, other.experts)
                and np.array_equal(self.weights, other.weights))


def popularity_rank(counts: np.ndarray) -> np.ndarray:
    """Experts by descending count; ties go to the lower id."""
    counts = np.asarray(counts)
    return np.lexsort((np.arange(counts.shape[-1]), -counts))


def imbalance_ratio(counts: np.ndarray) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        return 1.0
    return float(counts.max() / (total / counts.size))


@dataclass(frozen=True)
class CalibrationProfile:
    counts: np.ndarray  # (L, E) cumulative routed tokens
    top_k: int
    total_tokens: int

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2:
            raise ConfigError("profile counts must be (L, E)")
        if np.any(counts < 0):
            raise ValidationError("profile counts must be non-negative")
        object.__setattr__(self, "counts", counts)

    @property
    def num_layers(self) -> int:
        return self.counts.shape[0]

    @property
    def num_experts(self) -> int:
        return self.counts.shape[1]

    def rank(self, layer: int) -> np.ndarray:
        return popularity_rank(self.counts[layer])

    def imbalance(self, layer: int) -> float:
        return imbalance_ratio(self.counts[layer])

    @property
    def imbalance_ratios(self) -> list[float]:
        return [self.imbalance(layer) for layer in range(self.num_layers)]

    def top_experts(self, layer: int, k: int) -> list[int]:
        return [int(e) for e in self.rank(layer)[:k]]

    def __eq__(self, other):
        if not isinstance(other, CalibrationProfile):
            return NotImplemented
        return (self.top_k == other.top_k and self.total_tokens == other.total_tokens
                and np.array_equal(self.counts, other.counts))


def profile_traces(traces: list[RoutingTrace]) -> CalibrationProfile:
    if not traces:
        raise ConfigError("need at least one trace to profile")
    ref = traces[0]
    for tr in traces[1:]:
        if (tr.num_layers, tr.num_experts, tr.top_k) != (ref.num_layers, ref.num_experts, ref.top_k):
            raise ConfigError(
                f"trace shape (L={tr.num_layers}, E={tr.num_experts}, k={tr.top_k}) does not match "
                f"(L={ref.num_layers}, E={ref.num_experts}, k={ref.top_k})")
    counts = sum((tr.layer_counts() for tr in traces), np.zeros((ref.num_layers, ref.num_experts), np.int64))
    return CalibrationProfile(counts, ref.top_k, sum(tr.num_tokens for tr in traces))


def overlap_at_k(predicted, observed, k: int) -> float:
    predicted, observed = set(int(e) for e in predicted), set(int(e) for e in observed)
    if len(predicted) != k or len(observed) != k:
        raise ConfigError(f"both sets must have size K={k}, got {len(predicted)} and {len(observed)}")
    return len(predicted & observed) / k


@dataclass(frozen=True)
class OverlapReport:
    k: int
    per_layer: list[float]

    @property
    def median(self) -> float:
        return float(np.median(self.per_layer)) if self.per_layer else float("nan")

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_layer)) if self.per_layer else float("nan")


def validate_profile(profile: CalibrationProfile, heldout: RoutingTrace, k: int) -> OverlapReport:
    """Per-layer Overlap@K of predicted vs held-out top-K experts."""
    if k > profile.num_experts or k < 1:
        raise ConfigError(f"K={k} must lie in [1, E={profile.num_experts}]")
    if (heldout.num_layers, heldout.num_experts) != (profile.num_layers, profile.num_experts):
        raise ConfigError("held-out trace does not match profile shape")
    observed = heldout.layer_counts()
    per_layer = [
        overlap_at_k(profile.top_experts(layer, k), popularity_rank(observed[layer])[:k], k)
        for layer in range(profile.num_layers)
    ]
    return OverlapReport(k, per_layer)


def profile_to_dict(profile: CalibrationProfile) -> dict:
    return {
        "version": PROFILE_VERSION,
        "E": profile.num_experts,
        "L": profile.num_layers,
        "k": profile.top_k,
        "counts": profile.counts.tolist(),
        "total_tokens": int(profile.total_tokens),
    }


def profile_from_dict(doc: dict) -> CalibrationProfile:
    if doc.get("version") != PROFILE_VERSION:
        raise SchemaVersionError(f"unsupported profile version {doc.get('version')!r}, expected {PROFILE_VERSION}")
    try:
        counts = np.asarray(doc["counts"], dtype=np.int64)
        num_experts, num_layers, k, total = int(doc["E"]), int(doc["L"]), int(doc["k"]), int(doc["total_tokens"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed profile: {exc}") from exc
    if counts.shape != (num_layers, num_experts):
        raise ValidationError(f"counts shape {counts.shape} does not match L={num_layers}, E={num_experts}")
    if np.any(counts < 0):
        raise ValidationError("profile contains negative counts")
    if total < 0 or not 1 <= k <= num_experts:
        raise ValidationError("profile has invalid total_tokens or k")
    return CalibrationProfile(counts, k, total)


def save_profile(profile: CalibrationProfile, path) -> None:
    with open(path, "w") as fh:
        json.dump(profile_to_dict(profile), fh, indent=1)
        fh.write("\n")


def load_profile(path) -> CalibrationProfile:
    if not os.path.exists(path):
        raise FileNotFoundError(f"profile not found: {path}")
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
    return profile_from_dict(doc)

"""Exact MoE layer math: router, expert FFN, weighted combine.

Tensors are plain 2-D ``float32`` numpy arrays (rows x cols, row-major).
Everything here is dynamic-shape; it is the oracle that the static,
capacity-bounded path in :mod:`moesim.grouped` is checked against.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

DTYPE = np.float32


def as_tensor(x) -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim != 2:
        raise ConfigError(f"expected a 2-D tensor, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class MoELayerConfig:
    num_experts: int
    top_k: int
    hidden_dim: int
    ffn_dim: int

    def __post_init__(self):
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"need 1 <= k <= E, got k={self.top_k}, E={self.num_experts}")
        if self.hidden_dim < 1 or self.ffn_dim < 1:
            raise ConfigError("hidden_dim and ffn_dim must be >= 1")


@dataclass(frozen=True)
class ExpertWeights:
    """Bias-free two-layer FFN: ``silu(x @ w_up) @ w_down``."""

    w_up: np.ndarray    # H x F
    w_down: np.ndarray  # F x H

    def __post_init__(self):
        up, down = as_tensor(self.w_up), as_tensor(self.w_down)
        if up.shape[1] != down.shape[0] or up.shape[0] != down.shape[1]:
            raise ConfigError(f"inconsistent expert shapes {up.shape} / {down.shape}")
        object.__setattr__(self, "w_up", up)
        object.__setattr__(self, "w_down", down)

    @property
    def hidden_dim(self) -> int:
        return self.w_up.shape[0]

    @property
    def ffn_dim(self) -> int:
        return self.w_up.shape[1]


@dataclass(frozen=True)
class RoutingTable:
    """Top-k assignments for a batch of tokens.

    ``experts[t]`` and ``weights[t]`` list token ``t``'s k choices in
    descending gate order. ``token_lists[e]`` is the ascending list of tokens
    routed to expert ``e``; ``weight_lists[e]`` holds the matching gates.
    """

    experts: np.ndarray   # T x k, int
    weights: np.ndarray   # T x k, float32
    num_experts: int
    token_lists: tuple = field(init=False, repr=False)
    weight_lists: tuple = field(init=False, repr=False)

    def __post_init__(self):
        experts = np.asarray(self.experts, dtype=np.int64)
        weights = np.asarray(self.weights, dtype=DTYPE)
        if experts.ndim != 2 or experts.shape != weights.shape:
            raise ConfigError(f"experts/weights shape mismatch {experts.shape} vs {weights.shape}")
        if experts.size and (experts.min() < 0 or experts.max() >= self.num_experts):
            raise ConfigError("expert id out of range")
        object.__setattr__(self, "experts", experts)
        object.__setattr__(self, "weights", weights)
        token_lists, weight_lists = [], []
        flat_e = experts.ravel()
        flat_t = np.repeat(np.arange(experts.shape[0]), experts.shape[1])
        flat_w = weights.ravel()
        # stable sort by expert keeps ascending token order inside each expert
        order = np.argsort(flat_e, kind="stable")
        bounds = np.searchsorted(flat_e[order], np.arange(self.num_experts + 1))
        for e in range(self.num_experts):
            sel = order[bounds[e]:bounds[e + 1]]
            token_lists.append(flat_t[sel])
            weight_lists.append(flat_w[sel])
        object.__setattr__(self, "token_lists", tuple(token_lists))
        object.__setattr__(self, "weight_lists", tuple(weight_lists))

    @property
    def num_tokens(self) -> int:
        return self.experts.shape[0]

    @property
    def top_k(self) -> int:
        return self.experts.shape[1]

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(t) for t in self.token_lists], dtype=np.int64)

    def check(self, atol: float = 1e-5) -> None:
        """Raise ConfigError unless gates are positive, normalized and ids distinct."""
        if self.num_tokens == 0:
            return
        if np.any(self.weights <= 0):
            raise ConfigError("gate weights must be positive")
        if np.any(np.abs(self.weights.sum(axis=1) - 1.0) > atol):
            raise ConfigError("gate weights must sum to 1 per token")
        srt = np.sort(self.experts, axis=1)
        if np.any(srt[:, 1:] == srt[:, :-1]):
            raise ConfigError("duplicate expert id within a token")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def route_topk(hidden, router_w, k: int) -> RoutingTable:
    """Softmax over all experts, keep the top k, renormalize to sum 1.

    Equal logits resolve to the lower expert id.
    """
    hidden, router_w = as_tensor(hidden), as_tensor(router_w)
    if hidden.shape[1] != router_w.shape[0]:
        raise ConfigError(f"hidden dim {hidden.shape[1]} != router rows {router_w.shape[0]}")
    num_experts = router_w.shape[1]
    if not 1 <= k <= num_experts:
        raise ConfigError(f"k={k} outside [1, {num_experts}]")
    probs = softmax(hidden @ router_w)
    # stable sort on -p: equal probabilities keep ascending id order
    top = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    gates = np.take_along_axis(probs, top, axis=1)
    gates = gates / gates.sum(axis=1, keepdims=True)
    return RoutingTable(top, gates.astype(DTYPE), num_experts)


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def ffn_forward(x, w: ExpertWeights) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2:
        raise ConfigError(f"expected a 2-D input, got shape {x.shape}")
    if x.shape[1] != w.hidden_dim:
        raise ConfigError(f"input width {x.shape[1]} != expert hidden dim {w.hidden_dim}")
    if x.shape[0] == 0:
        return np.zeros((0, w.hidden_dim), dtype=DTYPE)
    return (silu(x @ w.w_up) @ w.w_down).astype(DTYPE, copy=False)


def reference_moe_forward(hidden, routing: RoutingTable, experts: list[ExpertWeights]) -> np.ndarray:
    """Dynamic per-expert batches, no capacity, no padding, no drops."""
    hidden = as_tensor(hidden)
    if hidden.shape[0] != routing.num_tokens:
        raise ConfigError("routing table does not match hidden batch")
    if routing.num_experts > len(experts):
        raise ConfigError(f"routing references {routing.num_experts} experts, got {len(experts)}")
    out = np.zeros_like(hidden)
    for e, (tokens, gates) in enumerate(zip(routing.token_lists, routing.weight_lists)):
        if len(tokens) == 0:
            continue
        y = ffn_forward(hidden[tokens], experts[e])
        np.add.at(out, tokens, gates[:, None] * y)
    return out


def l2_saliency(activations) -> np.ndarray:
    a = np.asarray(activations, dtype=np.float64)
    return np.sqrt(np.sum(a * a, axis=1))


def init_experts(rng: np.random.Generator, num_experts: int, hidden_dim: int, ffn_dim: int) -> list[ExpertWeights]:
    """Seeded random experts scaled so activations stay O(1) through the residual stream."""
    out = []
    for _ in range(num_experts):
        up = rng.standard_normal((hidden_dim, ffn_dim)) / np.sqrt(hidden_dim)
        down = rng.standard_normal((ffn_dim, hidden_dim)) / np.sqrt(ffn_dim) * 0.5
        out.append(ExpertWeights(up.astype(DTYPE), down.astype(DTYPE)))
    return out

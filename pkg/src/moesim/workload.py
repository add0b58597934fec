"""Synthetic skewed routing workloads and the newline-delimited trace format.

Trace file: a header line ``{"version": 1, "E": .., "L": .., "k": ..}``
followed by one JSON record per (layer, token):
``{"layer": l, "token": t, "experts": [...k ids], "weights": [...k gates]}``.
"""
from __future__ import annotations

import json

import numpy as np

from .calibration import RoutingTrace
from .errors import ConfigError, SchemaVersionError, TraceFormatError

TRACE_VERSION = 1


def zipf_weights(n: int, s: float) -> np.ndarray:
    p = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** s
    return p / p.sum()


def layer_popularity(rng: np.random.Generator, num_layers: int, num_experts: int,
                     zipf_s: float, layer_jitter: float) -> np.ndarray:
    """(L, E) routing probabilities: one Zipf vector, permuted per layer.

    Each layer perturbs a shared base permutation; ``layer_jitter=0`` gives
    every layer the same hot experts, ``1`` roughly reshuffles them.
    """
    base = rng.permutation(num_experts)
    probs = zipf_weights(num_experts, zipf_s)
    out = np.empty((num_layers, num_experts))
    for layer in range(num_layers):
        noise = rng.random(num_experts) * layer_jitter * num_experts
        perm = base[np.argsort(np.arange(num_experts) + noise, kind="stable")]
        out[layer, perm] = probs
    return out


def generate_workload(seed: int, prompt_len: int, num_layers: int, num_experts: int, top_k: int,
                      zipf_s: float = 0.5, layer_jitter: float = 0.3) -> RoutingTrace:
    """Seeded trace; each token draws k distinct experts from its layer's Zipf vector.

    Sampling without replacement uses the Gumbel top-k trick. Gate weights
    are Dirichlet(2) draws sorted in descending order.
    """
    if zipf_s < 0:
        raise ConfigError("zipf_s must be >= 0")
    if not 1 <= top_k <= num_experts:
        raise ConfigError(f"need 1 <= k <= E, got k={top_k}, E={num_experts}")
    if layer_jitter < 0:
        raise ConfigError("layer_jitter must be >= 0")
    rng = np.random.default_rng(seed)
    pop = layer_popularity(rng, num_layers, num_experts, zipf_s, layer_jitter)
    experts = np.empty((num_layers, prompt_len, top_k), dtype=np.int64)
    weights = np.empty((num_layers, prompt_len, top_k), dtype=np.float32)
    for layer in range(num_layers):
        keys = np.log(pop[layer]) + rng.gumbel(size=(prompt_len, num_experts))
        experts[layer] = np.argsort(-keys, axis=1, kind="stable")[:, :top_k]
        gates = rng.dirichlet(np.full(top_k, 2.0), size=prompt_len) if prompt_len else np.zeros((0, top_k))
        gates = np.maximum(gates, 1e-6)
        gates = -np.sort(-gates, axis=1)
        weights[layer] = gates / gates.sum(axis=1, keepdims=True)
    return RoutingTrace(experts, weights, num_experts)


def export_trace(trace: RoutingTrace, path) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"version": TRACE_VERSION, "E": trace.num_experts,
                             "L": trace.num_layers, "k": trace.top_k}) + "\n")
        for layer in range(trace.num_layers):
            for t in range(trace.num_tokens):
                rec = {"layer": layer, "token": t,
                       "experts": trace.experts[layer, t].tolist(),
                       "weights": [float(w) for w in trace.weights[layer, t]]}
                fh.write(json.dumps(rec) + "\n")


def ingest_trace(path) -> RoutingTrace:
    """Parse and validate a trace file; errors carry the offending line number."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    lines = [(i + 1, ln) for i, ln in enumerate(lines) if ln.strip()]
    if not lines:
        return RoutingTrace(np.zeros((0, 0, 0), np.int64), np.zeros((0, 0, 0), np.float32), 0)
    lineno, raw = lines[0]
    header = _parse(raw, lineno)
    if header.get("version") != TRACE_VERSION:
        raise SchemaVersionError(f"unsupported trace version {header.get('version')!r}")
    try:
        num_experts, num_layers, k = int(header["E"]), int(header["L"]), int(header["k"])
    except (KeyError, TypeError, ValueError):
        raise TraceFormatError("header needs integer E, L and k", lineno) from None
    if num_experts < 1 or num_layers < 0 or not 1 <= k <= num_experts:
        raise TraceFormatError("header E/L/k out of range", lineno)

    records: dict[tuple[int, int], tuple[list, list]] = {}
    for lineno, raw in lines[1:]:
        rec = _parse(raw, lineno)
        try:
            layer, token = int(rec["layer"]), int(rec["token"])
            experts, weights = list(rec["experts"]), [float(w) for w in rec["weights"]]
        except (KeyError, TypeError, ValueError):
            raise TraceFormatError("record needs layer, token, experts and weights", lineno) from None
        if not 0 <= layer < num_layers:
            raise TraceFormatError(f"layer {layer} outside [0, {num_layers})", lineno)
        if token < 0:
            raise TraceFormatError("negative token index", lineno)
        if len(experts) != k or len(weights) != k:
            raise TraceFormatError(f"expected {k} experts and weights, got {len(experts)}/{len(weights)}", lineno)
        if any(not isinstance(e, int) or e < 0 or e >= num_experts for e in experts):
            raise TraceFormatError(f"expert id outside [0, {num_experts})", lineno)
        if len(set(experts)) != k:
            raise TraceFormatError("duplicate expert ids in record", lineno)
        if any(w <= 0 for w in weights):
            raise TraceFormatError("gate weights must be positive", lineno)
        if (layer, token) in records:
            raise TraceFormatError(f"duplicate record for layer {layer}, token {token}", lineno)
        records[(layer, token)] = (experts, weights)

    num_tokens = 1 + max((t for _, t in records), default=-1)
    if len(records) != num_layers * num_tokens:
        raise TraceFormatError(f"expected {num_layers * num_tokens} records for {num_layers} layers x "
                               f"{num_tokens} tokens, found {len(records)}")
    experts = np.empty((num_layers, num_tokens, k), np.int64)
    weights = np.empty((num_layers, num_tokens, k), np.float32)
    for (layer, token), (e, w) in records.items():
        experts[layer, token] = e
        weights[layer, token] = w
    return RoutingTrace(experts, weights, num_experts)


def _parse(raw: str, lineno: int) -> dict:
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise TraceFormatError(f"invalid JSON ({exc.msg})", lineno) from None
    if not isinstance(doc, dict):
        raise TraceFormatError("expected a JSON object", lineno)
    return doc

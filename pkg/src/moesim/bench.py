"""Chunked-prefill runs under named execution modes, sweeps and ablations."""
from __future__ import annotations

import dataclasses
import logging
import numbers
from dataclasses import dataclass, field

import numpy as np

from .calibration import CalibrationProfile, OverlapReport, RoutingTrace, profile_traces, validate_profile
from .capacity import (OVERFLOW_POLICIES, CapacityPlan, align_up, assign_tiers, base_capacity,
                       derive_tier_set, uniform_plan)
from .core import RoutingTable, init_experts, l2_saliency, reference_moe_forward
from .devicesim import (STAGES, DeviceAnchors, GroupWork, RunMetrics, calibrate_device_profiles,
                        simulate_layer)
from .errors import ConfigError, InfeasiblePlanError, InvariantError
from .grouped import ExpertGroup, grouped_moe_forward, groups_from_plan
from .residency import (DeviceProfile, LayerPlacement, PlacementPlan, fixed_placement, graph_bytes,
                        plan_residency)
from .workload import generate_workload

log = logging.getLogger(__name__)

MODES = ("cpu-only", "naive-offload", "ours-base", "ours-T", "ours-TG", "ours-all")
ABLATION_MODES = ("ours-base", "ours-T", "ours-TG", "ours-all")
SWEEP_AXES = {"capacity": "capacity", "group_size": "group_size", "chunk_size": "chunk_size"}
VERIFY_RTOL = 1e-5


@dataclass
class RunConfig:
    num_experts: int = 16
    top_k: int = 2
    hidden_dim: int = 64
    ffn_dim: int = 128
    num_layers: int = 4
    prompt_len: int = 1024
    chunk_size: int = 256
    tier_multipliers: tuple = (4, 2, 1)
    group_size: int = 4
    hot_fraction: float = 0.25
    overflow_policy: str = "prune"
    capacity: int | None = None
    mode: str = "ours-all"
    seed: int = 0
    zipf_s: float = 0.5
    layer_jitter: float = 0.3
    calib_tokens: int | None = None
    attention_macs_per_token: int | None = None
    allow_cpu_fallback: bool = True
    verify: bool = True
    orchestration_cycles: float = 1000.0
    anchors: dict = field(default_factory=dict)
    devices: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tier_multipliers = tuple(self.tier_multipliers)

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.overflow_policy not in OVERFLOW_POLICIES:
            raise ConfigError(f"unknown overflow policy {self.overflow_policy!r}")
        ints = ("num_experts", "top_k", "hidden_dim", "ffn_dim", "num_layers", "prompt_len", "chunk_size",
                "group_size", "seed")
        optional_ints = ("capacity", "calib_tokens", "attention_macs_per_token")
        for name in ints + optional_ints:
            v = getattr(self, name)
            if (v is not None or name in ints) and (not isinstance(v, numbers.Integral) or isinstance(v, bool)):
                raise ConfigError(f"{name} must be an integer, got {v!r}")
        for name in ("hot_fraction", "zipf_s", "layer_jitter", "orchestration_cycles"):
            v = getattr(self, name)
            if not isinstance(v, numbers.Real) or isinstance(v, bool):
                raise ConfigError(f"{name} must be a number, got {v!r}")
        if not all(isinstance(m, numbers.Real) and not isinstance(m, bool) for m in self.tier_multipliers):
            raise ConfigError(f"tier multipliers must be numbers, got {list(self.tier_multipliers)}")
        for name in ints[:-1]:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.top_k > self.num_experts:
            raise ConfigError("top_k cannot exceed num_experts")
        if self.chunk_size > self.prompt_len:
            raise ConfigError(f"chunk_size {self.chunk_size} exceeds prompt_len {self.prompt_len}")
        if not 0 < self.hot_fraction <= 1:
            raise ConfigError("hot_fraction must be in (0, 1]")
        if self.capacity is not None and (self.capacity < 1 or self.capacity % 16):
            raise ConfigError("capacity override must be a positive multiple of 16")
        if self.zipf_s < 0:
            raise ConfigError("zipf_s must be >= 0")
        return self

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["tier_multipliers"] = list(self.tier_multipliers)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**doc)

    def attention_macs(self, tokens: int) -> int:
        """Fixed attention-stub work for a chunk (Q/K/V/O projections by default)."""
        per_token = self.attention_macs_per_token
        if per_token is None:
            per_token = 4 * self.hidden_dim * self.hidden_dim
        return per_token * tokens


def build_devices(config: RunConfig) -> dict[str, DeviceProfile]:
    """Anchor-calibrated NPU/CPU profiles with per-field overrides from the config."""
    try:
        anchors = DeviceAnchors(**config.anchors)
    except TypeError as exc:
        raise ConfigError(f"bad anchors: {exc}") from None
    npu, cpu = calibrate_device_profiles(anchors, config.hidden_dim, config.ffn_dim)
    devices = {"npu": npu, "cpu": cpu}
    for name, overrides in config.devices.items():
        base = devices[name].to_dict() if name in devices else {"name": name}
        base.update(overrides)
        base["name"] = name
        devices[name] = DeviceProfile.from_dict(base)
    return devices


@dataclass
class Workload:
    calibration: RoutingTrace
    runtime: RoutingTrace


def make_workload(config: RunConfig) -> Workload:
    """Calibration and runtime halves drawn from one seeded distribution."""
    n_cal = config.prompt_len if config.calib_tokens is None else config.calib_tokens
    full = generate_workload(config.seed, n_cal + config.prompt_len, config.num_layers,
                             config.num_experts, config.top_k, config.zipf_s, config.layer_jitter)
    return Workload(full.slice_tokens(0, n_cal), full.slice_tokens(n_cal, n_cal + config.prompt_len))


@dataclass
class ExecutionPlan:
    capacity: CapacityPlan
    placement: PlacementPlan
    dynamic: bool
    attention_device: str


def tiered_plan(config: RunConfig, profile: CalibrationProfile) -> CapacityPlan:
    tiers = derive_tier_set(base_capacity(config.chunk_size, config.num_experts, config.top_k),
                            config.tier_multipliers)
    return assign_tiers(profile, tiers, config.chunk_size, config.overflow_policy)


def build_plan(config: RunConfig, profile: CalibrationProfile, devices) -> ExecutionPlan:
    mode, B, L = config.mode, config.chunk_size, config.num_layers
    policy = config.overflow_policy
    H, F = config.hidden_dim, config.ffn_dim
    if mode == "cpu-only":
        cap = uniform_plan(profile, B, capacity=align_up(B), policy=policy)
        groups = [groups_from_plan(cap, layer, 1) for layer in range(L)]
        placement = fixed_placement(groups, "cpu", devices, H, F)
        return ExecutionPlan(cap, placement, True, "cpu")

    if config.capacity is not None:
        cap = uniform_plan(profile, B, capacity=config.capacity, policy=policy)
    elif mode == "naive-offload":
        cap = uniform_plan(profile, B, capacity=align_up(B), policy=policy)
    elif mode == "ours-base":
        cap = uniform_plan(profile, B, capacity=None, policy=policy)
    else:
        cap = tiered_plan(config, profile)

    if mode == "ours-all":
        placement = plan_residency(profile, cap, config.group_size, config.hot_fraction, devices, H, F)
    else:
        size = config.group_size if mode == "ours-TG" else 1
        groups = [groups_from_plan(cap, layer, size) for layer in range(L)]
        placement = fixed_placement(groups, "npu", devices, H, F, config.allow_cpu_fallback)
    if mode == "ours-all" and not config.allow_cpu_fallback:
        limit = devices["npu"].graph_size_limit
        for lp in placement.layers:
            too_big = [g.expert_ids for g in lp.groups if graph_bytes(g, H, F) > limit]
            if too_big:
                raise InfeasiblePlanError(f"groups {too_big} exceed the NPU graph limit and CPU fallback is disabled")
    return ExecutionPlan(cap, placement, False, "npu")


@dataclass
class RunReport:
    config: RunConfig
    rows: list[dict]
    chunk_metrics: list[RunMetrics]
    aggregate: RunMetrics
    capacity_summary: dict
    placement_summary: list
    overlap: OverlapReport | None
    output: np.ndarray = field(repr=False, default=None)
    routed_slots: int = 0

    @property
    def latency_per_token(self) -> float:
        return self.aggregate.latency_per_token

    @property
    def ept(self) -> float:
        return self.aggregate.ept


def _verify(out, hidden, routing, experts, dropped_by_token, where: str) -> None:
    ref = reference_moe_forward(hidden, routing, experts)
    mask = np.ones(routing.num_tokens, dtype=bool)
    if dropped_by_token:
        mask[list(dropped_by_token)] = False
    if not mask.any():
        return
    diff = np.abs(out[mask] - ref[mask]).max()
    scale = max(np.abs(ref[mask]).max(), np.finfo(np.float32).tiny)
    if diff / scale > VERIFY_RTOL:
        raise InvariantError(f"{where}: static-shape output deviates from the oracle (rel err {diff / scale:.3g})")


def run_prefill(config: RunConfig, trace: RoutingTrace | None = None,
                profile: CalibrationProfile | None = None, *, plan: ExecutionPlan | None = None,
                devices: dict | None = None) -> RunReport:
    """Process the prompt chunk by chunk through every layer and simulate the cost.

    Without ``trace`` a seeded workload is generated and its first half is
    used for calibration. With a ``trace`` and no ``profile``, the trace
    calibrates itself. ``plan`` bypasses plan construction (used to hold
    groups and placement fixed across variants).
    """
    config.validate()
    if trace is None:
        wl = make_workload(config)
        trace = wl.runtime
        if profile is None:
            profile = profile_traces([wl.calibration])
    elif profile is None:
        profile = profile_traces([trace])
    if (trace.num_layers, trace.num_experts, trace.top_k) != (config.num_layers, config.num_experts, config.top_k):
        raise ConfigError("trace shape does not match the model dimensions in the config")
    if trace.num_tokens < config.prompt_len:
        raise ConfigError(f"trace has {trace.num_tokens} tokens, prompt needs {config.prompt_len}")
    if (profile.num_layers, profile.num_experts) != (config.num_layers, config.num_experts):
        raise ConfigError("profile shape does not match the model dimensions in the config")

    devices = build_devices(config) if devices is None else devices
    plan = build_plan(config, profile, devices) if plan is None else plan
    H, F, L, E, B, P = (config.hidden_dim, config.ffn_dim, config.num_layers, config.num_experts,
                        config.chunk_size, config.prompt_len)

    rng = np.random.default_rng(config.seed + 7919)
    layer_experts = [init_experts(rng, E, H, F) for _ in range(L)]
    x = rng.standard_normal((P, H)).astype(np.float32)

    rows, chunk_metrics = [], []
    clock = 0.0
    routed = 0
    for c, start in enumerate(range(0, P, B)):
        stop = min(P, start + B)
        h = x[start:stop]
        chunk = RunMetrics()
        for layer in range(L):
            routing = RoutingTable(trace.experts[layer, start:stop], trace.weights[layer, start:stop], E)
            routed += routing.num_tokens * routing.top_k
            lp = plan.placement.layers[layer]
            if plan.dynamic:
                out = reference_moe_forward(h, routing, layer_experts[layer])
                counts = routing.counts
                work = [GroupWork([[int(counts[e]) for e in g.expert_ids]]) for g in lp.groups]
                exec_padded, exec_dropped = 0, 0
            else:
                saliency = l2_saliency(h)
                out, st = grouped_moe_forward(h, routing, lp.groups, layer_experts[layer], saliency,
                                              plan.capacity.policy)
                if config.verify:
                    _verify(out, h, routing, layer_experts[layer], st.dropped_by_token,
                            f"chunk {c} layer {layer}")
                dropped_per_group = [
                    sum(len(routing.token_lists[e]) for e in g.expert_ids) - sum(map(sum, occ))
                    for g, occ in zip(lp.groups, st.group_occupancy)
                ]
                work = [GroupWork(occ, d) for occ, d in zip(st.group_occupancy, dropped_per_group)]
                exec_padded, exec_dropped = st.padded_rows, st.dropped_tokens
            _, m = simulate_layer(lp, work, devices, H, F, tokens=stop - start, num_experts=E,
                                  attention_macs=config.attention_macs(stop - start),
                                  attention_device=plan.attention_device, dynamic=plan.dynamic,
                                  start=clock, orchestration=config.orchestration_cycles)
            if m.padded_rows != exec_padded or m.dropped_tokens != exec_dropped:
                raise InvariantError("simulated padding/drop counts disagree with packing bookkeeping")
            if m.packed_tokens + m.dropped_tokens != routing.num_tokens * routing.top_k:
                raise InvariantError("token accounting broken: packed + dropped != T x k")
            clock += m.ttft
            rows.append(metrics_row(config.mode, c, layer, m))
            m.tokens = 0
            chunk = chunk.fold(m)
            h = h + out
        chunk.tokens = stop - start
        chunk_metrics.append(chunk)
        x[start:stop] = h

    aggregate = RunMetrics()
    for cm in chunk_metrics:
        aggregate = aggregate.fold(cm)
    overlap = validate_profile(profile, trace.slice_tokens(0, P), min(8, E)) if P else None
    return RunReport(config, rows, chunk_metrics, aggregate, plan.capacity.summary(),
                     plan.placement.summary(), overlap, x, routed)


def metrics_row(mode: str, chunk, layer, m: RunMetrics) -> dict:
    row = {
        "mode": mode, "chunk": chunk, "layer": layer, "tokens": m.tokens,
        "latency": m.ttft, "energy_compute": m.energy_compute, "energy_comm": m.energy_comm,
        "ept": m.ept if m.tokens else 0.0, "cpu_cycles": m.cpu_cycles, "launches": m.launches,
        "padded_rows": m.padded_rows, "dropped_tokens": m.dropped_tokens, "packed_tokens": m.packed_tokens,
    }
    for stage in STAGES:
        row[f"t_{stage}"] = m.breakdown.get(stage, 0.0)
    return row


@dataclass
class SweepResult:
    axis: str
    values: list
    reports: list  # RunReport or None per value
    errors: list   # error message or None per value

    def summary(self) -> list[dict]:
        out = []
        for v, rep, err in zip(self.values, self.reports, self.errors):
            if rep is None:
                out.append({"axis": self.axis, "value": v, "status": "failed", "error": err})
                continue
            agg = rep.aggregate
            out.append({"axis": self.axis, "value": v, "status": "ok", "error": "",
                        "latency_per_token": agg.latency_per_token, "ept": agg.ept,
                        "launches": agg.launches, "padded_rows": agg.padded_rows,
                        "dropped_tokens": agg.dropped_tokens, "cpu_cycles": agg.cpu_cycles})
        return out


def sweep(template: RunConfig, axis: str, values, trace=None, profile=None) -> SweepResult:
    """One run per value of ``axis``; a failing run is recorded and the sweep continues."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}")
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    reports, errors = [], []
    for v in values:
        try:
            cfg = template.replace(**{SWEEP_AXES[axis]: v})
            reports.append(run_prefill(cfg, trace, profile))
            errors.append(None)
        except (ConfigError, InvariantError) as exc:
            log.warning("sweep %s=%s failed: %s", axis, v, exc)
            reports.append(None)
            errors.append(str(exc))
    return SweepResult(axis, values, reports, errors)


def ablate(template: RunConfig, modes=MODES, trace=None, profile=None) -> dict[str, RunReport]:
    return {m: run_prefill(template.replace(mode=m), trace, profile) for m in modes}


@dataclass
class PaddingImpact:
    tiered: RunReport
    padded: RunReport

    @property
    def padded_rows_reduction(self) -> float:
        p = self.padded.aggregate.padded_rows
        return (p - self.tiered.aggregate.padded_rows) / p if p else 0.0

    @property
    def cpu_cycle_ratio(self) -> float:
        return self.padded.aggregate.cpu_cycles / self.tiered.aggregate.cpu_cycles

    @property
    def latency_ratio(self) -> float:
        return self.padded.aggregate.ttft / self.tiered.aggregate.ttft


def padding_impact(config: RunConfig, trace=None, profile=None) -> PaddingImpact:
    """Tiered capacities vs uniform busiest-expert capacity, groups and placement held fixed."""
    config = config.replace(mode="ours-all", capacity=None).validate()
    if trace is None:
        wl = make_workload(config)
        trace = wl.runtime
        profile = profile or profile_traces([wl.calibration])
    elif profile is None:
        profile = profile_traces([trace])
    devices = build_devices(config)
    tiered = build_plan(config, profile, devices)
    padded_cap = uniform_plan(profile, config.chunk_size, capacity=None, policy=config.overflow_policy)
    layers = []
    for layer, lp in enumerate(tiered.placement.layers):
        groups = [ExpertGroup(g.expert_ids, padded_cap.capacity(layer, g.expert_ids[0])) for g in lp.groups]
        layers.append(LayerPlacement(groups, list(lp.devices), list(lp.hot)))
    padded = ExecutionPlan(padded_cap, PlacementPlan(layers), False, tiered.attention_device)
    return PaddingImpact(run_prefill(config, trace, profile, plan=tiered, devices=devices),
                         run_prefill(config, trace, profile, plan=padded, devices=devices))

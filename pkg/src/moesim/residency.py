"""Hot/cold expert grouping and group -> device placement."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .calibration import CalibrationProfile
from .capacity import CapacityPlan, expected_loads
from .errors import ConfigError, InfeasiblePlanError
from .grouped import ExpertGroup

BYTES_PER_WEIGHT = 4
DEFAULT_GRAPH_LIMIT = 1.2e9
DEVICE_NAMES = ("npu", "cpu", "aux")


@dataclass(frozen=True)
class DeviceProfile:
    """Cost coefficients of one execution unit, in logical time/energy units.

    Per-mac time is multiplied by ``small_rows_penalty`` for slices of fewer
    than ``min_efficient_rows`` rows (off by default).
    """

    name: str
    launch_overhead: float = 0.0
    sync_overhead: float = 0.0
    time_per_mac: float = 1.0
    energy_per_mac: float = 1.0
    energy_per_byte_moved: float = 0.0
    energy_per_sync: float = 0.0
    graph_size_limit: float = math.inf
    queue: str = "serialized"
    min_efficient_rows: int = 0
    small_rows_penalty: float = 1.0

    def __post_init__(self):
        if self.name not in DEVICE_NAMES:
            raise ConfigError(f"unknown device {self.name!r}")
        coeffs = (self.launch_overhead, self.sync_overhead, self.time_per_mac, self.energy_per_mac,
                  self.energy_per_byte_moved, self.energy_per_sync, self.graph_size_limit)
        if any(c < 0 for c in coeffs) or self.small_rows_penalty < 1 or self.min_efficient_rows < 0:
            raise ConfigError(f"device {self.name}: coefficients must be non-negative")
        if self.queue not in ("serialized", "parallel"):
            raise ConfigError(f"device {self.name}: queue must be serialized or parallel")
        if self.name == "npu" and self.queue != "serialized":
            raise ConfigError("the npu queue is serialized")

    @property
    def pays_sync(self) -> bool:
        return self.name != "cpu"

    def mac_time(self, macs: float, rows_per_slice: int | None = None) -> float:
        tpm = self.time_per_mac
        if rows_per_slice is not None and rows_per_slice < self.min_efficient_rows:
            tpm *= self.small_rows_penalty
        return macs * tpm

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(d["graph_size_limit"]):
            d["graph_size_limit"] = None
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "DeviceProfile":
        doc = dict(doc)
        if doc.get("graph_size_limit") is None:
            doc["graph_size_limit"] = math.inf
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown device fields {sorted(unknown)}")
        for key, value in doc.items():
            if key in ("name", "queue"):
                continue
            try:
                doc[key] = int(value) if key == "min_efficient_rows" else float(value)
            except (TypeError, ValueError):
                raise ConfigError(f"device field {key} must be a number, got {value!r}") from None
        return cls(**doc)


@dataclass
class LayerPlacement:
    groups: list[ExpertGroup]
    devices: list[str]
    hot: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.groups) != len(self.devices):
            raise ConfigError("one device per group required")


@dataclass
class PlacementPlan:
    layers: list[LayerPlacement]

    def resident_set(self, layer: int | None = None) -> list[ExpertGroup]:
        """Groups living on the NPU (one layer, or every layer)."""
        layers = self.layers if layer is None else [self.layers[layer]]
        return [g for lp in layers for g, d in zip(lp.groups, lp.devices) if d == "npu"]

    def summary(self) -> list[dict]:
        return [
            {"layer": i, "hot": lp.hot,
             "groups": [{"experts": list(g.expert_ids), "capacity": g.capacity, "device": d}
                        for g, d in zip(lp.groups, lp.devices)]}
            for i, lp in enumerate(self.layers)
        ]


def classify_hot_cold(profile: CalibrationProfile, layer: int, hot_fraction: float) -> tuple[list[int], list[int]]:
    if not 0 < hot_fraction <= 1:
        raise ConfigError(f"hot_fraction must be in (0, 1], got {hot_fraction}")
    rank = profile.top_experts(layer, profile.num_experts)
    n_hot = math.ceil(hot_fraction * profile.num_experts - 1e-9)
    return rank[:n_hot], rank[n_hot:]


def form_groups(hot, cold, group_size: int, plan: CapacityPlan, layer: int) -> list[ExpertGroup]:
    """Chunk hot then cold experts (kept apart) into groups at their max member capacity."""
    if group_size < 1:
        raise ConfigError("group size must be >= 1")
    groups = []
    for ids in (list(hot), list(cold)):
        for i in range(0, len(ids), group_size):
            members = ids[i:i + group_size]
            groups.append(ExpertGroup(tuple(members), max(plan.capacity(layer, e) for e in members)))
    return groups


def graph_bytes(group: ExpertGroup, hidden_dim: int, ffn_dim: int) -> int:
    return group.size * 2 * hidden_dim * ffn_dim * BYTES_PER_WEIGHT


def expert_macs(rows: int, hidden_dim: int, ffn_dim: int) -> int:
    return rows * 2 * hidden_dim * ffn_dim


def estimate_group_cost(group: ExpertGroup, loads, device: DeviceProfile, hidden_dim: int, ffn_dim: int) -> float:
    """Launch + sync (non-CPU only) + compute over the full padded buffer."""
    if len(loads) != group.size:
        raise ConfigError(f"expected {group.size} loads, got {len(loads)}")
    cost = device.launch_overhead
    if device.pays_sync:
        cost += device.sync_overhead
    return cost + device.mac_time(expert_macs(group.rows, hidden_dim, ffn_dim), group.capacity)


def place_group(group: ExpertGroup, loads, devices: dict[str, DeviceProfile], hidden_dim: int, ffn_dim: int) -> str:
    npu, cpu = devices.get("npu"), devices["cpu"]
    if npu is None or graph_bytes(group, hidden_dim, ffn_dim) > npu.graph_size_limit:
        return "cpu"
    npu_cost = estimate_group_cost(group, loads, npu, hidden_dim, ffn_dim)
    cpu_cost = estimate_group_cost(group, loads, cpu, hidden_dim, ffn_dim)
    return "npu" if npu_cost <= cpu_cost else "cpu"


def place_groups(groups_per_layer: list[list[ExpertGroup]], loads: np.ndarray,
                 devices: dict[str, DeviceProfile], hidden_dim: int, ffn_dim: int,
                 hot_per_layer=None) -> PlacementPlan:
    """Cheapest device per group; oversize graphs always fall back to the CPU.

    ``loads`` is the (L, E) expected per-chunk load.
    """
    if "cpu" not in devices:
        raise ConfigError("placement needs a cpu device")
    layers = []
    for layer, groups in enumerate(groups_per_layer):
        devs = [place_group(g, [loads[layer, e] for e in g.expert_ids], devices, hidden_dim, ffn_dim)
                for g in groups]
        hot = list(hot_per_layer[layer]) if hot_per_layer is not None else []
        layers.append(LayerPlacement(groups, devs, hot))
    return PlacementPlan(layers)


def fixed_placement(groups_per_layer: list[list[ExpertGroup]], device: str,
                    devices: dict[str, DeviceProfile], hidden_dim: int, ffn_dim: int,
                    allow_cpu_fallback: bool = True) -> PlacementPlan:
    """Everything on ``device``, except graphs too large for the NPU."""
    layers = []
    for groups in groups_per_layer:
        devs = []
        for g in groups:
            d = device
            if d == "npu" and graph_bytes(g, hidden_dim, ffn_dim) > devices["npu"].graph_size_limit:
                if not allow_cpu_fallback:
                    raise InfeasiblePlanError(
                        f"group {g.expert_ids} needs {graph_bytes(g, hidden_dim, ffn_dim)} bytes, over the "
                        f"NPU graph limit {devices['npu'].graph_size_limit:g}, and CPU fallback is disabled")
                d = "cpu"
            devs.append(d)
        layers.append(LayerPlacement(groups, devs))
    return PlacementPlan(layers)


def plan_residency(profile: CalibrationProfile, plan: CapacityPlan, group_size: int, hot_fraction: float,
                   devices: dict[str, DeviceProfile], hidden_dim: int, ffn_dim: int) -> PlacementPlan:
    """Hot/cold grouping followed by cost-based placement, for every layer."""
    groups, hots = [], []
    for layer in range(profile.num_layers):
        hot, cold = classify_hot_cold(profile, layer, hot_fraction)
        groups.append(form_groups(hot, cold, group_size, plan, layer))
        hots.append(hot)
    return place_groups(groups, expected_loads(profile, plan.chunk_size), devices, hidden_dim, ffn_dim, hots)

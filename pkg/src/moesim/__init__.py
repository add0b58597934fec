"""Static-shape Mixture-of-Experts execution and CPU/NPU cost simulation."""

from .bench import RunConfig, RunReport, ablate, padding_impact, run_prefill, sweep
from .calibration import (CalibrationProfile, RoutingTrace, load_profile, overlap_at_k, profile_traces,
                          save_profile, validate_profile)
from .capacity import (CapacityPlan, TierSet, assign_tiers, derive_tier_set, estimate_max_load, overflow,
                       prune_overflow)
from .core import (ExpertWeights, MoELayerConfig, RoutingTable, ffn_forward, l2_saliency,
                   reference_moe_forward, route_topk)
from .devicesim import (DeviceAnchors, DispatchEvent, RunMetrics, calibrate_device_profiles, cpu_cycles_proxy,
                        energy_accounting, simulate_layer)
from .grouped import ExpertGroup, PackedBatch, execute_group, grouped_moe_forward, pack, weighted_scatter
from .residency import (DeviceProfile, PlacementPlan, classify_hot_cold, estimate_group_cost, form_groups,
                        graph_bytes, place_groups)
from .workload import export_trace, generate_workload, ingest_trace

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "RunReport",
    "ablate",
    "padding_impact",
    "run_prefill",
    "sweep",
    "CalibrationProfile",
    "RoutingTrace",
    "load_profile",
    "overlap_at_k",
    "profile_traces",
    "save_profile",
    "validate_profile",
    "CapacityPlan",
    "TierSet",
    "assign_tiers",
    "derive_tier_set",
    "estimate_max_load",
    "overflow",
    "prune_overflow",
    "ExpertWeights",
    "MoELayerConfig",
    "RoutingTable",
    "ffn_forward",
    "l2_saliency",
    "reference_moe_forward",
    "route_topk",
    "DeviceAnchors",
    "DispatchEvent",
    "RunMetrics",
    "calibrate_device_profiles",
    "cpu_cycles_proxy",
    "energy_accounting",
    "simulate_layer",
    "ExpertGroup",
    "PackedBatch",
    "execute_group",
    "grouped_moe_forward",
    "pack",
    "weighted_scatter",
    "DeviceProfile",
    "PlacementPlan",
    "classify_hot_cold",
    "estimate_group_cost",
    "form_groups",
    "graph_bytes",
    "place_groups",
    "export_trace",
    "generate_workload",
    "ingest_trace",
]

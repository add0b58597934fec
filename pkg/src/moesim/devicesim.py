"""Logical-time CPU + NPU simulator for one MoE layer.

Per layer the host runs: attention stub (on its placed device), router,
pack of every group pass, then NPU-placed groups drain through the
serialized NPU queue while CPU-placed groups run on the host timeline.
Both timelines join before the weighted scatter.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError
from .residency import DeviceProfile, LayerPlacement, expert_macs

STAGES = ("attention_stub", "router", "pack", "expert_ffn", "scatter")
ORCHESTRATION_CYCLES = 1000
BYTES_PER_ACT = 4


@dataclass(frozen=True)
class DispatchEvent:
    device: str
    stage: str
    group: int | None
    start: float
    end: float
    macs: int = 0
    bytes_moved: int = 0
    syncs: int = 0

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class RunMetrics:
    ttft: float = 0.0
    energy_compute: float = 0.0
    energy_comm: float = 0.0
    tokens: int = 0
    cpu_cycles: float = 0.0
    breakdown: dict = field(default_factory=lambda: {s: 0.0 for s in STAGES})
    busy: dict = field(default_factory=dict)
    launches: int = 0
    padded_rows: int = 0
    dropped_tokens: int = 0
    packed_tokens: int = 0

    @property
    def energy(self) -> float:
        return self.energy_compute + self.energy_comm

    @property
    def ept(self) -> float:
        if self.tokens <= 0:
            raise ConfigError("energy per token is undefined for zero tokens")
        return self.energy / self.tokens

    @property
    def latency_per_token(self) -> float:
        if self.tokens <= 0:
            raise ConfigError("latency per token is undefined for zero tokens")
        return self.ttft / self.tokens

    def fold(self, other: "RunMetrics") -> "RunMetrics":
        """Sum of two back-to-back segments (times, energies, counts and tokens add)."""
        busy = dict(self.busy)
        for dev, t in other.busy.items():
            busy[dev] = busy.get(dev, 0.0) + t
        return RunMetrics(
            ttft=self.ttft + other.ttft,
            energy_compute=self.energy_compute + other.energy_compute,
            energy_comm=self.energy_comm + other.energy_comm,
            tokens=self.tokens + other.tokens,
            cpu_cycles=self.cpu_cycles + other.cpu_cycles,
            breakdown={s: self.breakdown.get(s, 0.0) + other.breakdown.get(s, 0.0) for s in STAGES},
            busy=busy,
            launches=self.launches + other.launches,
            padded_rows=self.padded_rows + other.padded_rows,
            dropped_tokens=self.dropped_tokens + other.dropped_tokens,
            packed_tokens=self.packed_tokens + other.packed_tokens,
        )


def cpu_cycles_proxy(events, orchestration: float = ORCHESTRATION_CYCLES) -> float:
    """Host work: MACs of CPU events, plus a fixed orchestration charge per event."""
    total = 0.0
    for ev in events:
        total += orchestration
        if ev.device == "cpu":
            total += ev.macs
    return total


def energy_accounting(events, devices: dict[str, DeviceProfile], tokens: int | None = None):
    """Return (E_compute, E_comm, EPT); EPT is None when ``tokens`` is None."""
    e_compute = e_comm = 0.0
    for ev in events:
        dev = devices[ev.device]
        e_compute += ev.macs * dev.energy_per_mac
        e_comm += ev.bytes_moved * dev.energy_per_byte_moved + ev.syncs * dev.energy_per_sync
    if tokens is None:
        return e_compute, e_comm, None
    if tokens <= 0:
        raise ConfigError("energy per token is undefined for zero tokens")
    return e_compute, e_comm, (e_compute + e_comm) / tokens


def metrics_from_events(events, devices, tokens: int, orchestration: float = ORCHESTRATION_CYCLES,
                        start: float = 0.0) -> RunMetrics:
    e_compute, e_comm, _ = energy_accounting(events, devices)
    m = RunMetrics(tokens=tokens, energy_compute=e_compute, energy_comm=e_comm,
                   cpu_cycles=cpu_cycles_proxy(events, orchestration))
    end = start
    for ev in events:
        m.breakdown[ev.stage] = m.breakdown.get(ev.stage, 0.0) + ev.duration
        m.busy[ev.device] = m.busy.get(ev.device, 0.0) + ev.duration
        end = max(end, ev.end)
        if ev.stage == "expert_ffn":
            m.launches += 1
    m.ttft = end - start
    return m


@dataclass(frozen=True)
class GroupWork:
    """What one group actually did in a layer: per pass, per slice occupancy."""

    occupancy: list[list[int]]
    dropped: int = 0


def simulate_layer(placement: LayerPlacement, work: list[GroupWork], devices: dict[str, DeviceProfile],
                   hidden_dim: int, ffn_dim: int, *, tokens: int, num_experts: int,
                   attention_macs: int = 0, attention_device: str = "npu", dynamic: bool = False,
                   start: float = 0.0, orchestration: float = ORCHESTRATION_CYCLES):
    """Simulate one layer of one chunk; returns (events, metrics).

    ``dynamic=True`` models shape-free CPU execution: each group computes only
    its routed rows and groups without tokens are skipped.
    """
    if len(work) != len(placement.groups):
        raise ConfigError(f"{len(work)} work entries for {len(placement.groups)} groups")
    for dev in set(placement.devices) | {attention_device}:
        if dev not in devices:
            raise ConfigError(f"placement uses device {dev!r} with no profile")
    if "cpu" not in devices:
        raise ConfigError("simulation needs a cpu device")
    cpu = devices["cpu"]
    events: list[DispatchEvent] = []
    free = {name: start for name in devices}

    def emit(device, stage, group, duration, macs=0, nbytes=0, syncs=0, ready=None):
        t0 = free[device] if ready is None else max(free[device], ready)
        ev = DispatchEvent(device, stage, group, t0, t0 + duration, int(macs), int(nbytes), syncs)
        free[device] = ev.end
        events.append(ev)
        return ev

    att = devices[attention_device]
    if attention_macs > 0:
        syncs = int(att.pays_sync)
        ev = emit(attention_device, "attention_stub", None,
                  att.launch_overhead + syncs * att.sync_overhead + att.mac_time(attention_macs),
                  attention_macs, 2 * tokens * hidden_dim * BYTES_PER_ACT * syncs, syncs)
        free["cpu"] = max(free["cpu"], ev.end)

    router_macs = tokens * hidden_dim * num_experts
    emit("cpu", "router", None, cpu.mac_time(router_macs), router_macs, tokens * hidden_dim * BYTES_PER_ACT)

    # pack NPU-bound groups first so the queue can start as early as possible
    order = sorted(range(len(work)), key=lambda i: (placement.devices[i] == "cpu", i))
    for i in order:
        group = placement.groups[i]
        for occ in work[i].occupancy:
            rows = sum(occ) if dynamic else group.rows
            if dynamic and rows == 0:
                continue
            emit("cpu", "pack", i, cpu.mac_time(rows * hidden_dim), rows * hidden_dim,
                 rows * hidden_dim * BYTES_PER_ACT)
    packed_at = free["cpu"]

    for i in order:
        group, device = placement.groups[i], placement.devices[i]
        dev = devices[device]
        for occ in work[i].occupancy:
            rows = sum(occ) if dynamic else group.rows
            if dynamic and rows == 0:
                continue
            slice_rows = max(occ) if dynamic else group.capacity
            macs = expert_macs(rows, hidden_dim, ffn_dim)
            syncs = int(dev.pays_sync)
            duration = dev.launch_overhead + syncs * dev.sync_overhead + dev.mac_time(macs, slice_rows)
            nbytes = 2 * rows * hidden_dim * BYTES_PER_ACT * syncs
            emit(device, "expert_ffn", i, duration, macs, nbytes, syncs, ready=packed_at)

    joined = max(free.values())
    free["cpu"] = joined
    for i in range(len(work)):
        for occ in work[i].occupancy:
            valid = sum(occ)
            if valid == 0:
                continue
            emit("cpu", "scatter", i, cpu.mac_time(valid * hidden_dim), valid * hidden_dim,
                 valid * hidden_dim * BYTES_PER_ACT)

    metrics = metrics_from_events(events, devices, tokens, orchestration, start)
    for i, w in enumerate(work):
        group = placement.groups[i]
        for occ in w.occupancy:
            metrics.packed_tokens += sum(occ)
            if not dynamic:
                metrics.padded_rows += group.rows - sum(occ)
        metrics.dropped_tokens += w.dropped
    return events, metrics


@dataclass(frozen=True)
class DeviceAnchors:
    """Targets the NPU/CPU coefficients are solved against.

    ``npu_speedup``: CPU per-mac time over NPU per-mac time, for slices of
    at least ``small_rows`` rows; smaller slices run ``small_rows_penalty``
    times slower per mac on the NPU.
    ``sync_fraction``: share of a reference run of ``ref_dispatches``
    single-expert NPU graphs of ``ref_rows`` rows spent in synchronization.
    """

    npu_speedup: float = 2.0
    sync_fraction: float = 0.6
    ref_dispatches: int = 16
    ref_rows: int = 128
    cpu_time_per_mac: float = 1e-3
    launch_to_sync: float = 0.25
    cpu_launch_to_sync: float = 0.05
    cpu_energy_per_mac: float = 1e-3
    npu_energy_ratio: float = 0.3
    energy_per_byte: float = 1e-4
    graph_size_limit: float = 1.2e9
    small_rows: int = 128
    small_rows_penalty: float = 2.0


def calibrate_device_profiles(anchors: DeviceAnchors, hidden_dim: int, ffn_dim: int):
    """Solve for (npu, cpu) profiles that reproduce the anchors exactly."""
    if anchors.npu_speedup <= 0:
        raise ConfigError("npu speedup ratio must be > 0")
    if not 0 <= anchors.sync_fraction < 1:
        raise ConfigError("sync fraction must lie in [0, 1)")
    if anchors.small_rows_penalty < 1:
        raise ConfigError("small-slice penalty must be >= 1")
    if anchors.ref_dispatches < 1 or anchors.ref_rows < 1:
        raise ConfigError("reference workload must be non-empty")
    if anchors.ref_rows < anchors.small_rows:
        raise ConfigError("reference workload must use full-efficiency slices")
    npu_tpm = anchors.cpu_time_per_mac / anchors.npu_speedup
    compute_time = anchors.ref_dispatches * expert_macs(anchors.ref_rows, hidden_dim, ffn_dim) * npu_tpm
    sync = anchors.sync_fraction / (1 - anchors.sync_fraction) * compute_time / anchors.ref_dispatches
    npu_epm = anchors.cpu_energy_per_mac * anchors.npu_energy_ratio
    npu = DeviceProfile(
        name="npu",
        launch_overhead=anchors.launch_to_sync * sync,
        sync_overhead=sync,
        time_per_mac=npu_tpm,
        energy_per_mac=npu_epm,
        energy_per_byte_moved=anchors.energy_per_byte,
        # a dispatch burns NPU active energy for its launch + sync duration
        energy_per_sync=npu_epm * (1 + anchors.launch_to_sync) * sync / npu_tpm,
        graph_size_limit=anchors.graph_size_limit,
        queue="serialized",
        min_efficient_rows=anchors.small_rows,
        small_rows_penalty=anchors.small_rows_penalty,
    )
    cpu = DeviceProfile(
        name="cpu",
        launch_overhead=anchors.cpu_launch_to_sync * sync,
        sync_overhead=0.0,
        time_per_mac=anchors.cpu_time_per_mac,
        energy_per_mac=anchors.cpu_energy_per_mac,
        energy_per_byte_moved=anchors.energy_per_byte,
        queue="parallel",
    )
    return npu, cpu

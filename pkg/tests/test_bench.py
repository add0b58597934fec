import numpy as np
import pytest

from moesim.bench import (ABLATION_MODES, MODES, RunConfig, build_devices, build_plan, make_workload,
                          padding_impact, run_prefill, sweep)
from moesim.calibration import profile_traces
from moesim.core import RoutingTable, init_experts, reference_moe_forward
from moesim.errors import ConfigError, InfeasiblePlanError

SMALL = RunConfig(num_experts=8, top_k=2, hidden_dim=16, ffn_dim=32, num_layers=2, prompt_len=256,
                  chunk_size=64, group_size=2)


def oracle_forward(config, trace, chunked):
    """Residual stack of reference layers, with the run's weight stream."""
    rng = np.random.default_rng(config.seed + 7919)
    experts = [init_experts(rng, config.num_experts, config.hidden_dim, config.ffn_dim)
               for _ in range(config.num_layers)]
    x = rng.standard_normal((config.prompt_len, config.hidden_dim)).astype(np.float32)
    step = config.chunk_size if chunked else config.prompt_len
    out = np.empty_like(x)
    for start in range(0, config.prompt_len, step):
        h = x[start:start + step]
        for layer in range(config.num_layers):
            rt = RoutingTable(trace.experts[layer, start:start + step],
                              trace.weights[layer, start:start + step], config.num_experts)
            h = h + reference_moe_forward(h, rt, experts[layer])
        out[start:start + step] = h
    return out


class TestRunPrefill:
    def test_chunk_count(self):
        rep = run_prefill(RunConfig(prompt_len=1024, chunk_size=256))
        assert len(rep.chunk_metrics) == 4
        assert rep.aggregate.tokens == 1024
        assert len(rep.rows) == 4 * 4

    def test_cpu_only_is_the_oracle(self):
        cfg = SMALL.replace(mode="cpu-only")
        rep = run_prefill(cfg)
        trace = make_workload(cfg).runtime
        np.testing.assert_array_equal(rep.output, oracle_forward(cfg, trace, chunked=True))

    def test_chunk_invariance(self):
        cfg = SMALL.replace(mode="cpu-only")
        rep = run_prefill(cfg)
        full = oracle_forward(cfg, make_workload(cfg).runtime, chunked=False)
        np.testing.assert_allclose(rep.output, full, rtol=1e-6, atol=1e-6)

    def test_aggregate_is_fold_of_chunks(self):
        rep = run_prefill(SMALL)
        agg = rep.aggregate
        assert agg.ttft == pytest.approx(sum(m.ttft for m in rep.chunk_metrics))
        assert agg.energy == pytest.approx(sum(m.energy for m in rep.chunk_metrics))
        assert agg.padded_rows == sum(r["padded_rows"] for r in rep.rows)
        assert agg.dropped_tokens == sum(r["dropped_tokens"] for r in rep.rows)
        assert agg.packed_tokens + agg.dropped_tokens == rep.routed_slots == 256 * 2 * 2

    def test_ours_all_beats_ours_base(self):
        base = run_prefill(RunConfig(mode="ours-base"))
        best = run_prefill(RunConfig(mode="ours-all"))
        assert best.latency_per_token < base.latency_per_token
        assert best.ept < base.ept

    def test_infeasible_without_fallback(self):
        tiny = {"npu": {"graph_size_limit": 1.0}}
        for mode in ("ours-all", "naive-offload"):
            with pytest.raises(InfeasiblePlanError):
                run_prefill(SMALL.replace(mode=mode, devices=tiny, allow_cpu_fallback=False))
        rep = run_prefill(SMALL.replace(devices=tiny))
        assert all(g["device"] == "cpu" for lp in rep.placement_summary for g in lp["groups"])

    def test_every_mode_accounts_tokens(self):
        for mode in MODES:
            rep = run_prefill(SMALL.replace(mode=mode))
            a = rep.aggregate
            assert a.packed_tokens + a.dropped_tokens == 256 * 2 * 2, mode

    def test_replayed_trace_matches_generated(self):
        wl = make_workload(SMALL)
        prof = profile_traces([wl.calibration])
        a = run_prefill(SMALL, wl.runtime, prof)
        b = run_prefill(SMALL)
        assert a.rows == b.rows

    def test_trace_shape_checked(self):
        wl = make_workload(SMALL)
        with pytest.raises(ConfigError):
            run_prefill(SMALL.replace(num_experts=6, group_size=2), wl.runtime)
        with pytest.raises(ConfigError):
            run_prefill(SMALL.replace(prompt_len=512, chunk_size=64), wl.runtime)

    def test_capacity_override(self):
        rep = run_prefill(SMALL.replace(mode="ours-TG", capacity=16))
        assert set(np.ravel(rep.capacity_summary["capacities"])) == {16}
        assert rep.aggregate.dropped_tokens > 0

    def test_overlap_reported(self):
        rep = run_prefill(RunConfig())
        assert rep.overlap.k == 8 and len(rep.overlap.per_layer) == 4


class TestPlans:
    def test_mode_shapes(self):
        cfg = RunConfig()
        wl = make_workload(cfg)
        prof = profile_traces([wl.calibration])
        devs = build_devices(cfg)
        shapes = {}
        for mode in MODES:
            plan = build_plan(cfg.replace(mode=mode), prof, devs)
            lp = plan.placement.layers[0]
            shapes[mode] = (len(lp.groups), sorted(set(lp.devices)), plan.dynamic)
        assert shapes["cpu-only"] == (16, ["cpu"], True)
        assert shapes["naive-offload"] == (16, ["npu"], False)
        assert shapes["ours-base"] == (16, ["npu"], False)
        assert shapes["ours-T"] == (16, ["npu"], False)
        assert shapes["ours-TG"] == (4, ["npu"], False)
        assert shapes["ours-all"][0] == 4
        naive = build_plan(cfg.replace(mode="naive-offload"), prof, devs)
        assert set(naive.capacity.capacities.ravel()) == {256}

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            RunConfig(mode="gpu").validate()
        with pytest.raises(ConfigError):
            RunConfig(chunk_size=2048, prompt_len=1024).validate()
        with pytest.raises(ConfigError):
            RunConfig(capacity=20).validate()
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"bogus": 1})
        with pytest.raises(ConfigError):
            build_devices(RunConfig(anchors={"nope": 1}))
        cfg = RunConfig(tier_multipliers=[8, 1])
        assert RunConfig.from_dict(cfg.to_dict()) == cfg

    def test_device_overrides(self):
        devs = build_devices(RunConfig(devices={"npu": {"launch_overhead": 7.0}}))
        assert devs["npu"].launch_overhead == 7.0
        assert devs["cpu"].launch_overhead > 0


class TestSweep:
    def test_single_value_equals_run(self):
        res = sweep(SMALL, "group_size", [2])
        assert res.reports[0].rows == run_prefill(SMALL).rows

    def test_failures_recorded(self):
        res = sweep(SMALL, "chunk_size", [64, 512, 128])
        assert [r["status"] for r in res.summary()] == ["ok", "failed", "ok"]
        assert "chunk_size" in res.errors[1]

    def test_group_launches(self):
        res = sweep(RunConfig(mode="ours-TG", capacity=64), "group_size", [1, 4, 8])
        per_layer = [r["launches"] / (4 * 4) for r in res.summary()]
        assert per_layer == [16, 4, 2]

    def test_capacity_trend_saturates(self):
        cfg = RunConfig(mode="ours-TG", group_size=1, overflow_policy="pad-only")
        lat = [r["latency_per_token"] for r in sweep(cfg, "capacity", [32, 64, 128]).summary()]
        assert lat[0] > lat[1] > lat[2]
        assert lat[0] - lat[1] > lat[1] - lat[2]

    def test_bad_axis(self):
        with pytest.raises(ConfigError):
            sweep(SMALL, "hidden_dim", [16])
        with pytest.raises(ConfigError):
            sweep(SMALL, "capacity", [])


def test_padding_impact_holds_groups_fixed():
    impact = padding_impact(RunConfig())
    tiered, padded = impact.tiered.placement_summary, impact.padded.placement_summary
    for a, b in zip(tiered, padded):
        assert [g["experts"] for g in a["groups"]] == [g["experts"] for g in b["groups"]]
        assert [g["device"] for g in a["groups"]] == [g["device"] for g in b["groups"]]
    assert impact.padded_rows_reduction > 0


def test_ablation_modes_listed():
    assert ABLATION_MODES == ("ours-base", "ours-T", "ours-TG", "ours-all")

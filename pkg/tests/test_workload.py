import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moesim.calibration import RoutingTrace, imbalance_ratio
from moesim.errors import ConfigError, SchemaVersionError, TraceFormatError
from moesim.workload import export_trace, generate_workload, ingest_trace, zipf_weights


class TestGenerate:
    def test_zipf_zero_is_balanced(self):
        trace = generate_workload(0, 4096, 4, 8, 2, zipf_s=0.0)
        for counts in trace.layer_counts():
            assert imbalance_ratio(counts) == pytest.approx(1.0, abs=0.1)

    def test_zipf_zero_median_k1(self):
        ratios = [imbalance_ratio(c) for s in range(5)
                  for c in generate_workload(s, 4096, 4, 8, 1, zipf_s=0.0).layer_counts()]
        assert np.median(ratios) == pytest.approx(1.0, abs=0.1)

    def test_heavy_skew(self):
        trace = generate_workload(0, 1024, 4, 8, 1, zipf_s=3.0)
        assert all(imbalance_ratio(c) >= 2 for c in trace.layer_counts())

    def test_deterministic(self):
        assert generate_workload(7, 100, 3, 8, 2) == generate_workload(7, 100, 3, 8, 2)
        assert generate_workload(7, 100, 3, 8, 2) != generate_workload(8, 100, 3, 8, 2)

    def test_zero_jitter_shares_hot_experts(self):
        trace = generate_workload(3, 2048, 3, 8, 1, zipf_s=2.0, layer_jitter=0.0)
        tops = {int(np.argmax(c)) for c in trace.layer_counts()}
        assert len(tops) == 1

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 1000), st.integers(0, 64), st.integers(1, 3), st.integers(1, 12), st.data())
    def test_well_formed(self, seed, tokens, layers, experts, data):
        k = data.draw(st.integers(1, experts))
        trace = generate_workload(seed, tokens, layers, experts, k, zipf_s=data.draw(st.floats(0, 3)))
        assert trace.experts.shape == (layers, tokens, k)
        if tokens:
            np.testing.assert_allclose(trace.weights.sum(axis=2), 1.0, rtol=1e-5)
            assert (trace.weights > 0).all()
            assert (np.diff(trace.weights, axis=2) <= 1e-7).all()

    def test_invalid(self):
        with pytest.raises(ConfigError):
            generate_workload(0, 10, 1, 4, 1, zipf_s=-1)
        with pytest.raises(ConfigError):
            generate_workload(0, 10, 1, 4, 5)

    def test_zipf_weights(self):
        np.testing.assert_allclose(zipf_weights(3, 1.0), np.array([1, 1 / 2, 1 / 3]) / (11 / 6))


class TestTraceFile:
    def test_round_trip(self, tmp_path):
        trace = generate_workload(2, 40, 3, 8, 2)
        export_trace(trace, tmp_path / "t.ndjson")
        assert ingest_trace(tmp_path / "t.ndjson") == trace

    def test_empty_file(self, tmp_path):
        (tmp_path / "e.ndjson").write_text("")
        trace = ingest_trace(tmp_path / "e.ndjson")
        assert trace.num_tokens == 0 and trace.num_layers == 0

    def write(self, tmp_path, records, header=None):
        header = header or {"version": 1, "E": 4, "L": 1, "k": 2}
        lines = [json.dumps(header)] + [r if isinstance(r, str) else json.dumps(r) for r in records]
        path = tmp_path / "bad.ndjson"
        path.write_text("\n".join(lines) + "\n")
        return path

    @pytest.mark.parametrize("record, fragment", [
        ({"layer": 0, "token": 0, "experts": [1], "weights": [1.0]}, "expected 2"),
        ({"layer": 0, "token": 0, "experts": [1, 4], "weights": [0.5, 0.5]}, "expert id"),
        ({"layer": 0, "token": 0, "experts": [1, 1], "weights": [0.5, 0.5]}, "duplicate expert"),
        ({"layer": 3, "token": 0, "experts": [0, 1], "weights": [0.5, 0.5]}, "layer 3"),
        ({"layer": 0, "token": 0, "experts": [0, 1], "weights": [1.0, 0.0]}, "positive"),
        ("{not json", "invalid JSON"),
        ({"layer": 0, "experts": [0, 1], "weights": [0.5, 0.5]}, "record needs"),
    ])
    def test_rejects_with_line_number(self, tmp_path, record, fragment):
        good = {"layer": 0, "token": 0, "experts": [0, 1], "weights": [0.5, 0.5]}
        if isinstance(record, dict) and record.get("token") == 0 and record.get("layer") == 0:
            good = {**good, "token": 1}
        path = self.write(tmp_path, [good, record])
        with pytest.raises(TraceFormatError, match=fragment) as info:
            ingest_trace(path)
        assert info.value.line == 3
        assert str(info.value).startswith("line 3:")

    def test_missing_records(self, tmp_path):
        path = self.write(tmp_path, [{"layer": 0, "token": 1, "experts": [0, 1], "weights": [0.5, 0.5]}])
        with pytest.raises(TraceFormatError):
            ingest_trace(path)

    def test_duplicate_record(self, tmp_path):
        rec = {"layer": 0, "token": 0, "experts": [0, 1], "weights": [0.5, 0.5]}
        with pytest.raises(TraceFormatError, match="duplicate record"):
            ingest_trace(self.write(tmp_path, [rec, rec]))

    def test_version(self, tmp_path):
        with pytest.raises(SchemaVersionError):
            ingest_trace(self.write(tmp_path, [], {"version": 9, "E": 4, "L": 1, "k": 2}))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ingest_trace(tmp_path / "nope")


def test_trace_slicing():
    trace = generate_workload(1, 20, 2, 6, 2)
    part = trace.slice_tokens(5, 9)
    assert isinstance(part, RoutingTrace) and part.num_tokens == 4
    np.testing.assert_array_equal(part.experts, trace.experts[:, 5:9])

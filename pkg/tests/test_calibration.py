import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moesim.calibration import (PROFILE_VERSION, CalibrationProfile, RoutingTrace, imbalance_ratio,
                                load_profile, overlap_at_k, popularity_rank, profile_from_dict,
                                profile_to_dict, profile_traces, save_profile, validate_profile)
from moesim.errors import ConfigError, SchemaVersionError, ValidationError
from moesim.workload import generate_workload


def trace_from_counts(counts, k=1):
    """Single-layer trace whose k=1 routing reproduces ``counts``."""
    ids = np.repeat(np.arange(len(counts)), counts)
    return RoutingTrace(ids.reshape(1, -1, 1), np.ones((1, len(ids), 1)), len(counts))


def uniform_trace(rng, layers, tokens, experts, k):
    ids = np.stack([[rng.choice(experts, k, replace=False) for _ in range(tokens)] for _ in range(layers)])
    return RoutingTrace(ids, np.full(ids.shape, 1.0 / k), experts)


class TestProfile:
    def test_worked_counts(self):
        prof = profile_traces([trace_from_counts([64, 32, 32, 0])])
        assert prof.imbalance(0) == pytest.approx(2.0)
        assert prof.rank(0).tolist() == [0, 1, 2, 3]

    def test_uniform_is_balanced(self):
        assert imbalance_ratio(np.full(8, 17)) == 1.0

    def test_empty_layer_defined_as_balanced(self):
        assert imbalance_ratio(np.zeros(4)) == 1.0

    def test_two_traces_add(self):
        a = generate_workload(1, 64, 2, 8, 2)
        b = generate_workload(2, 96, 2, 8, 2)
        prof = profile_traces([a, b])
        np.testing.assert_array_equal(prof.counts, a.layer_counts() + b.layer_counts())
        assert prof.total_tokens == 160

    def test_mismatched_traces(self):
        with pytest.raises(ConfigError):
            profile_traces([generate_workload(1, 8, 2, 8, 2), generate_workload(1, 8, 2, 6, 2)])
        with pytest.raises(ConfigError):
            profile_traces([])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 50), min_size=1, max_size=12))
    def test_rank_matches_sort_oracle(self, counts):
        expected = sorted(range(len(counts)), key=lambda e: (-counts[e], e))
        assert popularity_rank(np.array(counts)).tolist() == expected

    def test_negative_counts_rejected(self):
        with pytest.raises(ValidationError):
            CalibrationProfile(np.array([[1, -1]]), 1, 1)


class TestOverlap:
    def test_examples(self):
        assert overlap_at_k([1, 2, 3, 4], [4, 3, 2, 1], 4) == 1.0
        assert overlap_at_k([1, 2, 3, 4], [1, 2, 5, 6], 4) == 0.5
        assert overlap_at_k([1, 2], [3, 4], 2) == 0.0

    def test_size_mismatch(self):
        with pytest.raises(ConfigError):
            overlap_at_k([1, 2, 3], [1, 2], 3)

    def test_self_overlap_is_one(self):
        trace = generate_workload(3, 512, 4, 16, 2)
        report = validate_profile(profile_traces([trace]), trace, 8)
        assert report.per_layer == [1.0] * 4
        assert report.median == report.mean == 1.0

    def test_k_above_e(self):
        trace = generate_workload(3, 16, 1, 4, 1)
        with pytest.raises(ConfigError):
            validate_profile(profile_traces([trace]), trace, 5)

    def test_uniform_heldout_monte_carlo(self):
        # two independent uniform traces: E[|A ∩ B|] / K = K / E
        rng = np.random.default_rng(0)
        experts, k_top = 64, 4
        a = uniform_trace(rng, 200, 32, experts, 1)
        b = uniform_trace(rng, 200, 32, experts, 1)
        report = validate_profile(profile_traces([a]), b, k_top)
        assert report.mean == pytest.approx(k_top / experts, abs=0.03)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        prof = profile_traces([generate_workload(5, 128, 3, 8, 2)])
        save_profile(prof, tmp_path / "p.json")
        assert load_profile(tmp_path / "p.json") == prof

    def test_negative_count_file(self, tmp_path):
        doc = profile_to_dict(CalibrationProfile(np.array([[3, 1]]), 1, 4))
        doc["counts"][0][1] = -2
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(ValidationError):
            load_profile(path)

    def test_version_mismatch(self):
        doc = profile_to_dict(CalibrationProfile(np.array([[3, 1]]), 1, 4))
        doc["version"] = PROFILE_VERSION + 1
        with pytest.raises(SchemaVersionError):
            profile_from_dict(doc)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_profile(tmp_path / "nope.json")

    def test_error_kinds_distinct(self):
        assert not issubclass(SchemaVersionError, ValidationError)
        assert not issubclass(ValidationError, SchemaVersionError)

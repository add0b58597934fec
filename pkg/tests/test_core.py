import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moesim.core import (ExpertWeights, MoELayerConfig, RoutingTable, ffn_forward, l2_saliency,
                         reference_moe_forward, route_topk)
from moesim.errors import ConfigError

from conftest import random_instance


def naive_matmul(a, b):
    n, m = len(a), len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for p in range(len(b)):
                s += float(a[i][p]) * float(b[p][j])
            out[i][j] = s
    return out


def naive_ffn(x, w):
    h = naive_matmul(x.tolist(), w.w_up.tolist())
    h = [[v / (1.0 + math.exp(-v)) for v in row] for row in h]
    return np.array(naive_matmul(h, w.w_down.tolist()))


class TestRouteTopk:
    def test_single_token_k1(self):
        # logits (2.0, 1.0) from an identity router
        rt = route_topk(np.array([[2.0, 1.0]]), np.eye(2), 1)
        assert rt.experts.tolist() == [[0]]
        assert rt.weights[0, 0] == pytest.approx(1.0)

    def test_k_equals_e_is_plain_softmax(self):
        logits = np.array([[0.3, -1.2, 2.0, 0.0]])
        rt = route_topk(logits, np.eye(4), 4)
        probs = np.exp(logits[0]) / np.exp(logits[0]).sum()
        got = dict(zip(rt.experts[0].tolist(), rt.weights[0].tolist()))
        for e in range(4):
            assert got[e] == pytest.approx(probs[e], rel=1e-6)

    def test_conservation_256_tokens(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((256, 16))
        rt = route_topk(x, rng.standard_normal((16, 8)), 2)
        direct = sum(1 for t in range(256) for _ in rt.experts[t])
        assert direct == 512
        assert rt.counts.sum() == 512

    def test_ties_prefer_lower_id(self):
        rt = route_topk(np.zeros((3, 4)), np.zeros((4, 5)), 2)
        assert rt.experts.tolist() == [[0, 1]] * 3
        np.testing.assert_allclose(rt.weights, 0.5)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            route_topk(np.zeros((2, 3)), np.zeros((4, 2)), 1)
        with pytest.raises(ConfigError):
            route_topk(np.zeros((2, 3)), np.zeros((3, 2)), 3)

    def test_token_lists_ascending(self):
        _, rt, _ = random_instance(5, 64, 6, 2, 8, 8)
        for lst in rt.token_lists:
            assert list(lst) == sorted(lst)
        rt.check()

    def test_deterministic(self):
        a = random_instance(9, 40, 8, 2, 8, 8)[1]
        b = random_instance(9, 40, 8, 2, 8, 8)[1]
        assert np.array_equal(a.experts, b.experts) and np.array_equal(a.weights, b.weights)


class TestFFN:
    def test_zero_in_zero_out(self):
        rng = np.random.default_rng(0)
        w = ExpertWeights(rng.standard_normal((8, 12)), rng.standard_normal((12, 8)))
        assert not ffn_forward(np.zeros((5, 8)), w).any()

    def test_hand_computed(self):
        w = ExpertWeights(np.eye(2), np.eye(2))
        y = ffn_forward(np.array([[1.0, 2.0]]), w)
        # silu(1) = 1/(1+e^-1), silu(2) = 2/(1+e^-2)
        np.testing.assert_allclose(y, [[0.7310585786, 1.7615941560]], rtol=1e-6)

    def test_matches_naive_loops(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((64, 32)).astype(np.float32)
        w = ExpertWeights(rng.standard_normal((32, 64)) / 6, rng.standard_normal((64, 32)) / 8)
        np.testing.assert_allclose(ffn_forward(x, w), naive_ffn(x, w), rtol=1e-5, atol=1e-5)

    def test_empty_batch(self):
        w = ExpertWeights(np.ones((3, 4)), np.ones((4, 3)))
        assert ffn_forward(np.zeros((0, 3)), w).shape == (0, 3)

    def test_shape_errors(self):
        w = ExpertWeights(np.ones((3, 4)), np.ones((4, 3)))
        with pytest.raises(ConfigError):
            ffn_forward(np.zeros((2, 5)), w)
        with pytest.raises(ConfigError):
            ExpertWeights(np.ones((3, 4)), np.ones((5, 3)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 20), st.integers(0, 20), st.integers(0, 2**31 - 1))
    def test_rowwise_concat(self, n1, n2, seed):
        rng = np.random.default_rng(seed)
        w = ExpertWeights(rng.standard_normal((6, 10)) / 3, rng.standard_normal((10, 6)) / 3)
        a = rng.standard_normal((n1, 6)).astype(np.float32)
        b = rng.standard_normal((n2, 6)).astype(np.float32)
        both = ffn_forward(np.concatenate([a, b]), w)
        np.testing.assert_allclose(both, np.concatenate([ffn_forward(a, w), ffn_forward(b, w)]),
                                   rtol=1e-6, atol=1e-6)


class TestReferenceForward:
    def test_single_expert_k1(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((10, 4)).astype(np.float32)
        w = ExpertWeights(rng.standard_normal((4, 6)), rng.standard_normal((6, 4)))
        rt = RoutingTable(np.zeros((10, 1), int), np.ones((10, 1)), 1)
        np.testing.assert_array_equal(reference_moe_forward(x, rt, [w]), ffn_forward(x, w))

    def test_identical_experts_half_weights(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((7, 4)).astype(np.float32)
        w = ExpertWeights(rng.standard_normal((4, 6)), rng.standard_normal((6, 4)))
        rt = RoutingTable(np.tile([0, 1], (7, 1)), np.full((7, 2), 0.5), 2)
        np.testing.assert_allclose(reference_moe_forward(x, rt, [w, w]), ffn_forward(x, w), rtol=1e-6)

    def test_matches_per_token_loop(self):
        x, rt, experts = random_instance(4, 32, 4, 2, 16, 24)
        expected = np.zeros((32, 16))
        for t in range(32):
            for e, g in zip(rt.experts[t], rt.weights[t]):
                expected[t] += float(g) * naive_ffn(x[t:t + 1], experts[e])[0]
        np.testing.assert_allclose(reference_moe_forward(x, rt, experts), expected, rtol=1e-5, atol=1e-5)

    def test_each_token_uses_k_experts(self, small_instance):
        _, rt, _ = small_instance
        per_token = np.zeros(rt.num_tokens, int)
        for lst in rt.token_lists:
            per_token[lst] += 1
        assert (per_token == rt.top_k).all()

    def test_gate_scaling_is_linear(self, small_instance):
        x, rt, experts = small_instance
        scaled = RoutingTable(rt.experts, rt.weights * 3.0, rt.num_experts)
        np.testing.assert_allclose(reference_moe_forward(x, scaled, experts),
                                   3.0 * reference_moe_forward(x, rt, experts), rtol=1e-5, atol=1e-6)

    def test_expert_out_of_range(self):
        with pytest.raises(ConfigError):
            RoutingTable(np.array([[3]]), np.array([[1.0]]), 2)
        rt = RoutingTable(np.array([[1]]), np.array([[1.0]]), 2)
        w = ExpertWeights(np.ones((2, 2)), np.ones((2, 2)))
        with pytest.raises(ConfigError):
            reference_moe_forward(np.ones((1, 2)), rt, [w])


class TestSaliency:
    def test_zero_and_345(self):
        np.testing.assert_allclose(l2_saliency(np.array([[0.0, 0.0], [3.0, 4.0]])), [0.0, 5.0])

    def test_random_rows(self):
        rng = np.random.default_rng(8)
        a = rng.standard_normal((20, 33)).astype(np.float32)
        expected = [math.sqrt(math.fsum(float(v) ** 2 for v in row)) for row in a]
        np.testing.assert_allclose(l2_saliency(a), expected, rtol=1e-6)


def test_layer_config_validation():
    MoELayerConfig(8, 2, 16, 32)
    with pytest.raises(ConfigError):
        MoELayerConfig(4, 5, 16, 32)
    with pytest.raises(ConfigError):
        MoELayerConfig(4, 1, 0, 32)

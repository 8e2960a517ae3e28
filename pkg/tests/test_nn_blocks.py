"""Fusion building blocks: shape contracts, symmetries, gradient integrity."""

import numpy as np
import pytest

from trifuse import autodiff as ad
from trifuse import nn
from trifuse.autodiff import Tensor, finite_difference_check, parameter


def make_rng(seed=0):
    return np.random.default_rng(seed)


class TestLayerNorm:
    def test_constant_input_maps_to_zero(self):
        x = Tensor([5.0, 5.0, 5.0])
        out = nn.layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, np.zeros(3), atol=1e-12)

    def test_already_normalized_is_fixed_point(self):
        x = Tensor([1.0, -1.0])
        out = nn.layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-6)

    def test_nonpositive_eps_rejected(self):
        with pytest.raises(ValueError):
            nn.layer_norm(Tensor([1.0, 2.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)

    def test_gradient_matches_finite_differences(self):
        rng = make_rng(5)
        x = parameter(rng.normal(size=4))
        gain = parameter(rng.normal(size=4))
        bias = parameter(rng.normal(size=4))
        r = rng.normal(size=4)

        def f():
            return (nn.layer_norm(x, gain, bias) * r).sum()

        assert finite_difference_check(f, [x, gain, bias], eps=1e-5) < 1e-4


class TestCrossAttention:
    def test_single_kv_token_attention_weight_is_one(self):
        rng = make_rng(1)
        attn = nn.MultiHeadCrossAttention(8, 4, rng, dtype=np.float64)
        q = Tensor(rng.normal(size=(3, 8)))
        kv = Tensor(rng.normal(size=(1, 8)))
        _, weights = attn(q, kv, return_weights=True)
        np.testing.assert_array_equal(weights, np.ones((4, 3, 1)))

    def test_kv_permutation_invariance(self):
        rng = make_rng(2)
        block = nn.CrossAttentionBlock(8, 2, rng, dtype=np.float64)
        q = Tensor(rng.normal(size=(3, 8)))
        kv = rng.normal(size=(5, 8))
        out = block(q, Tensor(kv))
        perm = rng.permutation(5)
        out_perm = block(q, Tensor(kv[perm]))
        np.testing.assert_allclose(out.data, out_perm.data, atol=1e-12)

    def test_dim_mismatch_rejected(self):
        rng = make_rng(3)
        block = nn.CrossAttentionBlock(8, 2, rng)
        with pytest.raises(ValueError, match="dim mismatch"):
            block(Tensor(np.zeros((2, 8), dtype=np.float32)), Tensor(np.zeros((3, 6), dtype=np.float32)))

    def test_heads_must_divide_dim(self):
        with pytest.raises(ValueError, match="divisible"):
            nn.MultiHeadCrossAttention(6, 4, make_rng())

    def test_full_jacobian_matches_finite_differences(self):
        """Every output entry, every parameter; m=2, L=3, d=4, 64-bit."""
        rng = make_rng(4)
        block = nn.CrossAttentionBlock(4, 2, rng, dtype=np.float64)
        q = Tensor(rng.normal(size=(2, 4)))
        kv = Tensor(rng.normal(size=(3, 4)))
        params = block.parameters()
        for i in range(2):
            for j in range(4):

                def f(i=i, j=j):
                    out = block(q, kv)
                    return ad.narrow(ad.narrow(out, 0, i, 1), 1, j, 1).sum()

                assert finite_difference_check(f, params, eps=1e-5) < 1e-4

    def test_gradient_reaches_inputs(self):
        rng = make_rng(6)
        block = nn.CrossAttentionBlock(8, 4, rng, dtype=np.float64)
        q = parameter(rng.normal(size=(2, 8)))
        kv = parameter(rng.normal(size=(4, 8)))
        r = rng.normal(size=(2, 8))

        def f():
            return (block(q, kv) * r).sum()

        assert finite_difference_check(f, [q, kv], eps=1e-5) < 1e-4


class TestGatedFusion:
    def test_zero_gate_yields_exact_zero_matrix(self):
        rng = make_rng(7)
        fusion = nn.GatedFusion(8, 4, 2, rng)
        v = Tensor(rng.normal(size=(3, 8)).astype(np.float32))
        a = Tensor(rng.normal(size=(5, 8)).astype(np.float32))
        out = fusion(v, a)
        np.testing.assert_array_equal(out.data, np.zeros((3, 8), dtype=np.float32))

    def test_saturated_gate_equals_raw_stack(self):
        rng = make_rng(8)
        fusion = nn.GatedFusion(8, 2, 1, rng, dtype=np.float64)
        fusion.gate.data = np.array(25.0)
        v = Tensor(rng.normal(size=(2, 8)))
        a = Tensor(rng.normal(size=(3, 8)))
        gated = fusion(v, a)
        raw = fusion.stack(v, a)
        np.testing.assert_allclose(gated.data, raw.data, atol=1e-5)

    def test_gate_gradient_matches_finite_differences(self):
        rng = make_rng(9)
        fusion = nn.GatedFusion(4, 2, 2, rng, dtype=np.float64)
        fusion.gate.data = np.array(0.3)  # off zero so the stack output matters
        v = Tensor(rng.normal(size=(2, 4)))
        a = Tensor(rng.normal(size=(3, 4)))
        r = rng.normal(size=(2, 4))

        def f():
            return (fusion(v, a) * r).sum()

        assert finite_difference_check(f, [fusion.gate], eps=1e-5) < 1e-4

    def test_full_stack_gradient(self):
        rng = make_rng(10)
        fusion = nn.GatedFusion(4, 2, 2, rng, dtype=np.float64)
        fusion.gate.data = np.array(0.5)
        v = Tensor(rng.normal(size=(2, 4)))
        a = Tensor(rng.normal(size=(3, 4)))
        r = rng.normal(size=(2, 4))

        def f():
            return (fusion(v, a) * r).sum()

        assert finite_difference_check(f, fusion.parameters(), eps=1e-5) < 1e-4


class TestResampler:
    def test_output_length_is_query_count(self):
        rng = make_rng(11)
        rs = nn.Resampler(8, 4, 12, rng)
        tokens = Tensor(rng.normal(size=(40, 8)).astype(np.float32))
        assert rs(tokens).shape == (12, 8)

    @pytest.mark.parametrize("length", [1, 5, 64])
    def test_any_input_length(self, length):
        rng = make_rng(12)
        rs = nn.Resampler(8, 2, 4, rng)
        out = rs(Tensor(rng.normal(size=(length, 8)).astype(np.float32)))
        assert out.shape == (4, 8)

    def test_too_long_input_rejected(self):
        rng = make_rng(13)
        rs = nn.Resampler(8, 2, 4, rng, max_len=16)
        with pytest.raises(ValueError, match="max_len"):
            rs(Tensor(np.zeros((17, 8), dtype=np.float32)))

    def test_zero_inputs_give_parameter_only_output(self):
        """All-zero inputs: output depends only on parameters, bit-equal across items."""
        rng = make_rng(14)
        rs = nn.Resampler(8, 2, 4, rng)
        first = rs(Tensor(np.zeros((6, 8), dtype=np.float32)))
        second = rs(Tensor(np.zeros((6, 8), dtype=np.float32)))
        np.testing.assert_array_equal(first.data, second.data)

    def test_gradient_check(self):
        rng = make_rng(15)
        rs = nn.Resampler(4, 2, 3, rng, max_len=8, dtype=np.float64)
        tokens = Tensor(rng.normal(size=(3, 4)))
        r = rng.normal(size=(3, 4))

        def f():
            return (rs(tokens) * r).sum()

        assert finite_difference_check(f, rs.parameters(), eps=1e-5) < 1e-4


class TestBlockEvalCounter:
    def test_counter_increments_per_block_call(self):
        rng = make_rng(16)
        stack = nn.CrossAttentionStack(4, 2, 3, rng)
        q = Tensor(np.zeros((2, 4), dtype=np.float32))
        kv = Tensor(np.zeros((3, 4), dtype=np.float32))
        before = nn.BLOCK_EVAL_COUNTER["count"]
        stack(q, kv)
        assert nn.BLOCK_EVAL_COUNTER["count"] == before + 3

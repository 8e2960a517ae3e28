"""Fusion modes, zero-gate identities, pooled pre-fusion outputs, index building."""

import numpy as np
import pytest

from trifuse import autodiff as ad
from trifuse.autodiff import Tensor, finite_difference_check
from trifuse.data import ItemRecord, Manifest, resolve_missing
from trifuse.fusion import (
    AV_AUDIO_WEIGHT,
    AV_VISUAL_WEIGHT,
    FusionMode,
    FusionParams,
    forward_video,
    load_params,
    precompute_index,
    pre_fusion_pooled,
    save_params,
)
from trifuse.similarity import combined_similarity


D, M = 8, 3
MAN = Manifest(dim=D, teacher_dim=4, frames=M, speech_pad=6, audio_pad=M)


def make_item(seed=0, with_audio=True, with_speech=True) -> ItemRecord:
    rng = np.random.default_rng(seed)
    return ItemRecord(
        item_id=f"item{seed}",
        visual_tokens=rng.normal(size=(M, D)).astype(np.float32),
        audio_tokens=rng.normal(size=(4, D)).astype(np.float32) if with_audio else None,
        speech_tokens=rng.normal(size=(6, D)).astype(np.float32) if with_speech else None,
    )


def make_params(seed=0, dtype=np.float32) -> FusionParams:
    return FusionParams(dim=D, frames=M, heads=2, seed=seed, dtype=dtype)


class TestForwardVideo:
    def test_vision_only_passthrough(self):
        item = make_item(1)
        fused, vbar = forward_video(item, make_params(), FusionMode.VISION_ONLY)
        np.testing.assert_array_equal(fused.data, item.visual_tokens)
        np.testing.assert_allclose(vbar.data, item.visual_tokens.mean(axis=0), rtol=1e-6)

    @pytest.mark.parametrize("mode", [FusionMode.SAVE, FusionMode.AVIGATE_PLUS, FusionMode.LEARNABLE_WEIGHTS])
    def test_zero_gate_identity_is_bitwise(self, mode):
        """Fresh gates are zero, so every gated mode must emit the raw visual tokens."""
        item = make_item(2)
        fused, _ = forward_video(item, make_params(), mode)
        np.testing.assert_array_equal(fused.data, item.visual_tokens)

    def test_avigate_weighted_sum_coefficients(self):
        """With the audio branch stubbed to echo v, Eq-style weights give back v.

        Fused tokens are stored rescaled by 1/0.95 (cosine-equivalent), so the
        check multiplies back.
        """
        item = make_item(3)
        params = make_params()
        params.audio_fusion = lambda v, a: v  # identity stub
        fused, _ = forward_video(item, params, FusionMode.AVIGATE)
        np.testing.assert_allclose(AV_VISUAL_WEIGHT * fused.data, item.visual_tokens, rtol=1e-6)
        assert AV_VISUAL_WEIGHT + AV_AUDIO_WEIGHT == 1.0

    def test_no_audio_uses_speech_branch_only(self):
        item = make_item(4)
        params = make_params()
        params.speech_fusion.gate.data = np.asarray(0.7, dtype=np.float32)
        fused, _ = forward_video(item, params, FusionMode.NO_AUDIO)
        s_hat = params.speech_fusion(
            Tensor(item.visual_tokens), Tensor(item.speech_tokens)
        )
        np.testing.assert_allclose(fused.data, item.visual_tokens + s_hat.data, rtol=1e-5)

    def test_late_fusion_rejected_here(self):
        with pytest.raises(ValueError, match="late_fusion"):
            forward_video(make_item(5), make_params(), FusionMode.LATE_FUSION)

    def test_unresolved_item_rejected(self):
        item = make_item(6, with_audio=False)
        with pytest.raises(ValueError, match="resolve_missing"):
            forward_video(item, make_params(), FusionMode.SAVE)

    def test_deterministic(self):
        item = make_item(7)
        params = make_params(seed=3)
        a, _ = forward_video(item, params, FusionMode.SAVE)
        b, _ = forward_video(item, params, FusionMode.SAVE)
        np.testing.assert_array_equal(a.data, b.data)

    def test_gradients_reach_every_branch(self):
        """Perturbed gates: loss gradients flow to both gates, resampler, both stacks."""
        params = FusionParams(dim=4, frames=2, heads=2, seed=1, dtype=np.float64)
        params.audio_fusion.gate.data = np.asarray(0.4)
        params.speech_fusion.gate.data = np.asarray(-0.3)
        rng = np.random.default_rng(0)
        item = ItemRecord(
            item_id="g",
            visual_tokens=rng.normal(size=(2, 4)),
            audio_tokens=rng.normal(size=(3, 4)),
            speech_tokens=rng.normal(size=(3, 4)),
        )
        r = rng.normal(size=(2, 4))

        def f():
            fused, _ = forward_video(item, params, FusionMode.SAVE)
            return (fused * r).sum()

        probes = [
            params.audio_fusion.gate,
            params.speech_fusion.gate,
            params.resampler.queries,
            params.audio_fusion.stack.blocks[0].attn.wv.weight,
            params.speech_fusion.stack.blocks[1].ff.fc2.weight,
        ]
        assert finite_difference_check(f, probes, eps=1e-5) < 1e-4
        for p in probes:
            p.grad = None
        f().backward()
        for p in probes:
            assert p.grad is not None and np.any(p.grad != 0.0)


class TestPreFusionPooled:
    def test_equal_visual_tokens_pool_to_unit_direction(self):
        u = np.array([3.0, 0.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0], dtype=np.float32)
        item = ItemRecord("p", np.tile(u, (M, 1)), np.zeros((2, D), np.float32), None)
        v_mean, _ = pre_fusion_pooled(item, make_params())
        np.testing.assert_allclose(v_mean.data, u / 5.0, rtol=1e-6)

    def test_single_frame_pools_to_itself(self):
        rng = np.random.default_rng(9)
        v = rng.normal(size=(1, D)).astype(np.float32)
        params = FusionParams(dim=D, frames=1, heads=2)
        item = ItemRecord("p1", v, np.zeros((2, D), np.float32), None)
        v_mean, _ = pre_fusion_pooled(item, params)
        np.testing.assert_allclose(v_mean.data, v[0] / np.linalg.norm(v[0]), rtol=1e-5)

    def test_missing_audio_items_share_one_pooled_audio(self):
        params = make_params()
        a = resolve_missing(make_item(10, with_audio=False), MAN)
        b = resolve_missing(make_item(11, with_audio=False), MAN)
        _, a_mean = pre_fusion_pooled(a, params)
        _, b_mean = pre_fusion_pooled(b, params)
        np.testing.assert_array_equal(a_mean.data, b_mean.data)
        assert np.linalg.norm(a_mean.data) > 0.5  # resampler output, not zeros

    def test_gradient_flows_to_resampler(self):
        params = FusionParams(dim=4, frames=2, heads=2, seed=2, dtype=np.float64)
        rng = np.random.default_rng(1)
        item = ItemRecord("g", rng.normal(size=(2, 4)), rng.normal(size=(3, 4)), None)
        r = rng.normal(size=4)

        def f():
            _, a_mean = pre_fusion_pooled(item, params)
            return (a_mean * r).sum()

        assert finite_difference_check(f, params.resampler.parameters(), eps=1e-5) < 1e-4


class TestIndex:
    def items(self, n=5):
        return [make_item(100 + i, with_audio=i % 2 == 0, with_speech=i % 3 == 0) for i in range(n)]

    def test_two_runs_identical(self):
        params = make_params(4)
        a = precompute_index(self.items(), params, FusionMode.SAVE, MAN)
        b = precompute_index(self.items(), params, FusionMode.SAVE, MAN)
        np.testing.assert_array_equal(a.tokens, b.tokens)
        np.testing.assert_array_equal(a.pooled, b.pooled)

    def test_shapes(self):
        index = precompute_index(self.items(5), make_params(), FusionMode.SAVE, MAN)
        assert index.tokens.shape == (5, M, D)
        assert index.pooled.shape == (5, D)
        assert index.holistic is None

    def test_holistic_mode_fills_vectors(self):
        index = precompute_index(self.items(3), make_params(), FusionMode.HOLISTIC, MAN)
        assert index.holistic.shape == (3, D)

    def test_late_fusion_mode_fills_speech_pool(self):
        index = precompute_index(self.items(3), make_params(), FusionMode.LATE_FUSION, MAN)
        assert index.speech_pool.shape == (3, D)

    def test_index_scores_match_fresh_forward(self):
        params = make_params(5)
        params.audio_fusion.gate.data = np.asarray(0.3, dtype=np.float32)
        params.speech_fusion.gate.data = np.asarray(-0.2, dtype=np.float32)
        items = self.items(4)
        index = precompute_index(items, params, FusionMode.SAVE, MAN)
        rng = np.random.default_rng(0)
        query = rng.normal(size=D).astype(np.float32)
        for i, item in enumerate(items):
            fused, vbar = forward_video(resolve_missing(item, MAN), params, FusionMode.SAVE)
            direct = combined_similarity(fused.data, vbar.data, query)
            via_index = combined_similarity(index.tokens[i], index.pooled[i], query)
            assert abs(direct - via_index) < 1e-6


class TestParamsIO:
    def test_round_trip_bit_exact(self, tmp_path):
        params = make_params(6)
        params.audio_fusion.gate.data = np.asarray(0.25, dtype=np.float32)
        save_params(params, tmp_path / "p.ckpt")
        back = load_params(tmp_path / "p.ckpt")
        for (na, a), (nb, b) in zip(params.named_parameters(), back.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(a.data, b.data)

    def test_two_saves_identical_bytes(self, tmp_path):
        params = make_params(7)
        save_params(params, tmp_path / "a.ckpt")
        save_params(params, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

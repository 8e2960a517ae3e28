"""End-to-end video representation under every fusion mode, plus the offline index.

The trainable bundle (`FusionParams`) holds one audio resampler, two
independently parameterized gated-fusion stacks (audio, speech), the
contrastive logit scale, the holistic-aggregation weights, and the optional
learnable combination weights alpha/beta. At default initialization every
fusion mode that is defined through the gates reduces exactly to the raw
visual tokens.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .data import KIND_TOKENS, KIND_VECTOR, ItemRecord, Manifest, read_container, resolve_missing, write_container


class FusionMode(str, Enum):
    SAVE = "save"
    AVIGATE = "avigate"
    AVIGATE_PLUS = "avigate_plus"
    VISION_ONLY = "vision_only"
    NO_AUDIO = "no_audio"
    LATE_FUSION = "late_fusion"
    LEARNABLE_WEIGHTS = "learnable_weights"
    HOLISTIC = "holistic"


# Audio-visual weighted-sum coefficients. The fused tokens are stored
# rescaled by 1/AV_VISUAL_WEIGHT (v + 0.05/0.95 * a_hat): a positive scalar
# multiple scores identically under every cosine-based similarity and keeps
# the zero-gate reduction to v bit-exact.
AV_VISUAL_WEIGHT = 0.95
AV_AUDIO_WEIGHT = 0.05

LOGIT_SCALE_INIT = math.log(1.0 / 0.07)


class HolisticAggregator(nn.Module):
    """Attention-pooled single-vector video representation.

    Token scores are q . tanh(tokens W); the output is the softmax-weighted
    sum of the tokens.
    """

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float32):
        scale = 1.0 / math.sqrt(dim)
        self.weight = ad.parameter(rng.normal(0.0, scale, size=(dim, dim)).astype(dtype))
        self.query = ad.parameter(rng.normal(0.0, scale, size=dim).astype(dtype))

    def __call__(self, tokens: Tensor) -> Tensor:
        scores = ad.matmul(ad.tanh(ad.matmul(tokens, self.weight)), self.query)  # (m,)
        weights = ad.softmax(scores, axis=-1)
        return (tokens * ad.reshape(weights, (tokens.shape[0], 1))).sum(axis=0)


class FusionParams(nn.Module):
    """Every trainable tensor of the fusion network, in a fixed order."""

    def __init__(
        self,
        dim: int,
        frames: int,
        heads: int = 4,
        fusion_depth: int = 2,
        resampler_depth: int = 1,
        max_audio_len: int = 64,
        seed: int = 0,
        dtype=np.float32,
    ):
        rng = np.random.default_rng(seed)
        self.resampler = nn.Resampler(
            dim, heads, frames, rng, depth=resampler_depth, max_len=max_audio_len, dtype=dtype
        )
        self.audio_fusion = nn.GatedFusion(dim, heads, fusion_depth, rng, dtype=dtype)
        self.speech_fusion = nn.GatedFusion(dim, heads, fusion_depth, rng, dtype=dtype)
        self.holistic = HolisticAggregator(dim, rng, dtype=dtype)
        self.logit_scale = ad.parameter(np.asarray(LOGIT_SCALE_INIT, dtype=dtype))
        self.alpha = ad.parameter(np.asarray(1.0, dtype=dtype))
        self.beta = ad.parameter(np.asarray(0.0, dtype=dtype))
        self.arch = {
            "dim": dim,
            "frames": frames,
            "heads": heads,
            "fusion_depth": fusion_depth,
            "resampler_depth": resampler_depth,
            "max_audio_len": max_audio_len,
        }
        self.dtype = np.dtype(dtype)

    def temperature_scale(self) -> Tensor:
        """Positive contrastive score multiplier exp(logit_scale)."""
        return ad.exp(self.logit_scale)


def save_params(params: FusionParams, path) -> None:
    """Checkpoint: tensors in the standard container + architecture sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = {}
    for name, p in params.named_parameters():
        kind = KIND_TOKENS if p.data.ndim == 2 else KIND_VECTOR
        records[f"param/{name}"] = (kind, p.data)
    write_container(path, records)
    meta = dict(params.arch)
    meta["dtype"] = params.dtype.name
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_params(path) -> FusionParams:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    dtype = np.dtype(meta.pop("dtype"))
    params = FusionParams(**meta, dtype=dtype)
    records = read_container(path)
    for name, p in params.named_parameters():
        key = f"param/{name}"
        if key not in records:
            raise ValueError(f"checkpoint missing parameter {name}")
        p.data = records[key][1].reshape(p.data.shape).astype(dtype)
    return params


@dataclass
class VideoIndex:
    """Offline per-video artifact scored online without any network evaluation."""

    mode: FusionMode
    item_ids: list[str]
    tokens: np.ndarray  # (n, m, d) fused tokens
    pooled: np.ndarray  # (n, d) token means
    holistic: np.ndarray | None = None  # (n, d), holistic mode
    speech_pool: np.ndarray | None = None  # (n, d), late_fusion mode


def _tokens_tensor(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype))


def forward_video(item: ItemRecord, params: FusionParams, mode: FusionMode) -> tuple[Tensor, Tensor]:
    """Fused tokens (m, d) and their mean for one resolved item.

    The item must come through `resolve_missing` first in the modes that
    touch audio or speech.
    """
    mode = FusionMode(mode)
    if mode == FusionMode.LATE_FUSION:
        raise ValueError("late_fusion is assembled at scoring time, not in forward_video")
    needs_audio = mode in (FusionMode.AVIGATE, FusionMode.AVIGATE_PLUS, FusionMode.SAVE,
                           FusionMode.HOLISTIC, FusionMode.LEARNABLE_WEIGHTS)
    needs_speech = mode in (FusionMode.NO_AUDIO, FusionMode.SAVE, FusionMode.HOLISTIC,
                            FusionMode.LEARNABLE_WEIGHTS)
    if (needs_audio and item.audio_tokens is None) or (needs_speech and item.speech_tokens is None):
        raise ValueError(f"item {item.item_id} must go through resolve_missing before {mode.value} fusion")

    v = _tokens_tensor(item.visual_tokens, params.dtype)
    if mode == FusionMode.VISION_ONLY:
        fused = v
    elif mode in (FusionMode.AVIGATE, FusionMode.AVIGATE_PLUS):
        a_hat = params.audio_fusion(v, params.resampler(_tokens_tensor(item.audio_tokens, params.dtype)))
        fused = v + a_hat * (AV_AUDIO_WEIGHT / AV_VISUAL_WEIGHT)
    elif mode == FusionMode.NO_AUDIO:
        s_hat = params.speech_fusion(v, _tokens_tensor(item.speech_tokens, params.dtype))
        fused = v + s_hat
    elif mode in (FusionMode.SAVE, FusionMode.HOLISTIC):
        a_hat = params.audio_fusion(v, params.resampler(_tokens_tensor(item.audio_tokens, params.dtype)))
        s_hat = params.speech_fusion(v, _tokens_tensor(item.speech_tokens, params.dtype))
        fused = v + (a_hat + s_hat) * 0.5
    elif mode == FusionMode.LEARNABLE_WEIGHTS:
        a_hat = params.audio_fusion(v, params.resampler(_tokens_tensor(item.audio_tokens, params.dtype)))
        s_hat = params.speech_fusion(v, _tokens_tensor(item.speech_tokens, params.dtype))
        gamma = 1.0 - params.alpha - params.beta
        fused = params.alpha * v + params.beta * a_hat + gamma * s_hat
    else:  # pragma: no cover - exhaustive enum
        raise ValueError(f"unhandled mode {mode}")

    return fused, fused.mean(axis=0)


def pre_fusion_pooled(item: ItemRecord, params: FusionParams) -> tuple[Tensor, Tensor]:
    """L2-normalized means of the visual tokens and the pre-fusion resampled
    audio tokens; the student-affinity inputs."""
    v_mean = _tokens_tensor(item.visual_tokens, params.dtype).mean(axis=0)
    a_tokens = params.resampler(_tokens_tensor(item.audio_tokens, params.dtype))
    return ad.l2_normalize(v_mean), ad.l2_normalize(a_tokens.mean(axis=0))


def _raw_speech_pool(item: ItemRecord) -> np.ndarray:
    return np.asarray(item.speech_tokens, dtype=np.float32).mean(axis=0)


def precompute_index(
    items: list[ItemRecord], params: FusionParams, mode: FusionMode, manifest: Manifest
) -> VideoIndex:
    """One forward pass per item; a pure function of (items, params, mode)."""
    mode = FusionMode(mode)
    ids, tokens, pooled, holistic, speech_pool = [], [], [], [], []
    with ad.no_grad():
        for item in items:
            item = resolve_missing(item, manifest)
            fwd_mode = FusionMode.AVIGATE if mode == FusionMode.LATE_FUSION else mode
            fused, vbar = forward_video(item, params, fwd_mode)
            ids.append(item.item_id)
            tokens.append(fused.data.astype(np.float32))
            pooled.append(vbar.data.astype(np.float32))
            if mode == FusionMode.HOLISTIC:
                holistic.append(params.holistic(fused).data.astype(np.float32))
            if mode == FusionMode.LATE_FUSION:
                speech_pool.append(_raw_speech_pool(item))
    return VideoIndex(
        mode=mode,
        item_ids=ids,
        tokens=np.stack(tokens) if tokens else np.zeros((0, manifest.frames, manifest.dim), dtype=np.float32),
        pooled=np.stack(pooled) if pooled else np.zeros((0, manifest.dim), dtype=np.float32),
        holistic=np.stack(holistic) if holistic else None,
        speech_pool=np.stack(speech_pool) if speech_pool else None,
    )


def save_index(index: VideoIndex, path) -> None:
    path = Path(path)
    records = {}
    for i, item_id in enumerate(index.item_ids):
        records[f"index/{item_id}/tokens"] = (KIND_TOKENS, index.tokens[i])
        records[f"index/{item_id}/pooled"] = (KIND_VECTOR, index.pooled[i])
        if index.holistic is not None:
            records[f"index/{item_id}/holistic"] = (KIND_VECTOR, index.holistic[i])
        if index.speech_pool is not None:
            records[f"index/{item_id}/speech_pool"] = (KIND_VECTOR, index.speech_pool[i])
    write_container(path, records)
    meta = {"mode": index.mode.value, "item_ids": index.item_ids}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_index(path) -> VideoIndex:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    records = read_container(path)
    ids = meta["item_ids"]
    tokens = np.stack([records[f"index/{i}/tokens"][1] for i in ids])
    pooled = np.stack([records[f"index/{i}/pooled"][1] for i in ids])
    holistic = None
    speech_pool = None
    if ids and f"index/{ids[0]}/holistic" in records:
        holistic = np.stack([records[f"index/{i}/holistic"][1] for i in ids])
    if ids and f"index/{ids[0]}/speech_pool" in records:
        speech_pool = np.stack([records[f"index/{i}/speech_pool"][1] for i in ids])
    return VideoIndex(
        mode=FusionMode(meta["mode"]),
        item_ids=ids,
        tokens=tokens,
        pooled=pooled,
        holistic=holistic,
        speech_pool=speech_pool,
    )

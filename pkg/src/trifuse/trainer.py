"""Deterministic training loop: Adam, cosine decay, checkpoint selection.

One optimization step = batch -> per-item fusion forward (+ pre-fusion pooling
for the student affinity) -> differentiable score matrix -> contrastive +
alignment -> backward -> clipped Adam update at the cosine-scheduled rate.
Identical (seed, config, dataset) triples reproduce bit-identical logs,
parameters and checkpoints; log records therefore carry no wall-clock fields.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .data import Dataset, ItemRecord, batch_iter, resolve_missing
from .evaluation import summary_metrics
from .fusion import FusionMode, FusionParams, forward_video, precompute_index, pre_fusion_pooled
from .losses import (
    AlignKind,
    affinity_from_teacher,
    contrastive_loss,
    filtered_albef_loss,
    hard_albef_loss,
    huber_align_loss,
    mse_align_loss,
    soft_albef_loss,
    student_affinity,
    total_loss,
)
from .similarity import batch_scores, score_matrix

logger = logging.getLogger(__name__)

# Modes with no audio branch have nothing to align; the alignment term is
# forced to zero there.
ALIGN_CAPABLE_MODES = frozenset(
    {
        FusionMode.SAVE,
        FusionMode.AVIGATE,
        FusionMode.AVIGATE_PLUS,
        FusionMode.LATE_FUSION,
        FusionMode.LEARNABLE_WEIGHTS,
        FusionMode.HOLISTIC,
    }
)


class NanGradientError(RuntimeError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name}")
        self.parameter = name


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 128
    lr: float = 1e-4
    backbone_lr: float | None = None  # encoders are out of scope; parity slot only
    sharpness: float = 20.0
    tau_init: float = 0.07
    align_kind: AlignKind = AlignKind.SOFT_ALBEF
    keep_ratio: float = 1.0  # filtered alignment only
    margin: float = 0.0
    mode: FusionMode = FusionMode.SAVE
    seed: int = 0
    eval_every: int = 0
    grad_clip: float | None = 1.0
    heads: int = 4
    fusion_depth: int = 2
    resampler_depth: int = 1
    max_audio_len: int = 64

    def __post_init__(self):
        self.align_kind = AlignKind(self.align_kind)
        self.mode = FusionMode(self.mode)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 for contrastive training")
        if self.lr <= 0 or self.tau_init <= 0:
            raise ValueError("learning rate and tau must be positive")


class Adam:
    """Bias-corrected Adam over named parameters."""

    def __init__(self, named_params: list[tuple[str, Tensor]], beta1=0.9, beta2=0.999, eps=1e-8):
        self.named_params = named_params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.moments = {
            name: (np.zeros_like(p.data), np.zeros_like(p.data)) for name, p in named_params
        }

    def step(self, lr: float) -> None:
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.step_count += 1
        t = self.step_count
        for name, p in self.named_params:
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NanGradientError(name)
            m, v = self.moments[name]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self.moments[name] = (m, v)
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p.data = p.data - (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """base_lr * 0.5 * (1 + cos(pi * step / total_steps))."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def clip_global_norm(named_params, max_norm: float) -> float:
    total = 0.0
    for _, p in named_params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for _, p in named_params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return norm


@dataclass
class TrainResult:
    params: FusionParams
    checkpoints: list[tuple[int, dict[str, np.ndarray]]]  # (epoch, name -> tensor)
    log: list[dict]
    aborted: bool = False
    abort_reason: str | None = None


def _snapshot(params: FusionParams) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in params.named_parameters()}


def _restore(params: FusionParams, state: dict[str, np.ndarray]) -> None:
    for name, p in params.named_parameters():
        p.data = state[name].copy()


def _first_query_of(dataset: Dataset, split: str) -> dict[str, str]:
    """Each training item pairs with its lexicographically first split query."""
    mapping: dict[str, str] = {}
    for qid in sorted(dataset.manifest.splits[split]["queries"]):
        gt = dataset.queries[qid].ground_truth_item
        mapping.setdefault(gt, qid)
    return mapping


def _alignment_term(
    config: TrainConfig, items: list[ItemRecord], params: FusionParams
) -> tuple[Tensor | None, float]:
    """Alignment loss over the sub-batch with teacher embeddings, or None."""
    if config.align_kind == AlignKind.NONE or config.mode not in ALIGN_CAPABLE_MODES:
        return None, 0.0
    with_teacher = [it for it in items if it.has_teacher()]
    if len(with_teacher) < 2:
        logger.debug("alignment skipped: only %d items carry teacher embeddings", len(with_teacher))
        return None, 0.0
    m0 = affinity_from_teacher(
        np.stack([it.teacher_video for it in with_teacher]),
        np.stack([it.teacher_audio for it in with_teacher]),
    )
    m1 = student_affinity([pre_fusion_pooled(it, params) for it in with_teacher])
    kind = config.align_kind
    if kind == AlignKind.SOFT_ALBEF:
        term = soft_albef_loss(m0, m1)
    elif kind == AlignKind.HARD_ALBEF:
        term = hard_albef_loss(m1)
    elif kind == AlignKind.FILTERED:
        term = filtered_albef_loss(m1, m0, config.keep_ratio)
    elif kind == AlignKind.MSE:
        term = mse_align_loss(m0, m1)
    else:
        term = huber_align_loss(m0, m1)
    return term, float(term.data)


def train(
    config: TrainConfig,
    dataset: Dataset,
    train_split: str = "train",
    val_split: str | None = None,
) -> TrainResult:
    man = dataset.manifest
    params = FusionParams(
        dim=man.dim,
        frames=man.frames,
        heads=config.heads,
        fusion_depth=config.fusion_depth,
        resampler_depth=config.resampler_depth,
        max_audio_len=config.max_audio_len,
        seed=config.seed,
    )
    params.logit_scale.data = np.asarray(math.log(1.0 / config.tau_init), dtype=params.dtype)

    item_ids = list(man.splits[train_split]["items"])
    query_of = _first_query_of(dataset, train_split)
    missing = [i for i in item_ids if i not in query_of]
    if missing:
        raise ValueError(f"train items without any query: {missing[:5]}")

    steps_per_epoch = len(item_ids) // config.batch_size
    total_steps = steps_per_epoch * config.epochs
    if total_steps == 0:
        raise ValueError("batch size leaves no full training batch")

    adam = Adam(list(params.named_parameters()))
    log: list[dict] = []
    checkpoints: list[tuple[int, dict[str, np.ndarray]]] = []
    last_good = _snapshot(params)
    step = 0

    for epoch in range(config.epochs):
        for batch_ids in batch_iter(item_ids, config.batch_size, config.seed * 100003 + epoch, train=True):
            items = [resolve_missing(dataset.items[i], man) for i in batch_ids]
            queries = np.stack([dataset.queries[query_of[i]].embedding for i in batch_ids])

            fused = [forward_video(it, params, config.mode) for it in items]
            speech_pools = (
                np.stack([np.asarray(it.speech_tokens).mean(axis=0) for it in items])
                if config.mode == FusionMode.LATE_FUSION
                else None
            )
            scores = batch_scores(
                fused,
                queries,
                config.mode,
                sharpness=config.sharpness,
                speech_pools=speech_pools,
                params=params,
            )
            contrastive = contrastive_loss(scores, scale=params.temperature_scale(), margin=config.margin)
            align_term, align_value = _alignment_term(config, items, params)
            loss = total_loss(contrastive, align_term, config.align_kind)

            if not np.isfinite(float(loss.data)):
                _restore(params, last_good)
                reason = f"non-finite loss at step {step}"
                logger.error("%s; restored last-good parameters", reason)
                return TrainResult(params, checkpoints, log, aborted=True, abort_reason=reason)

            params.zero_grad()
            loss.backward()
            if config.grad_clip:
                clip_global_norm(adam.named_params, config.grad_clip)
            lr = cosine_lr(step, total_steps, config.lr)
            try:
                adam.step(lr)
            except NanGradientError as err:
                _restore(params, last_good)
                reason = str(err)
                logger.error("%s; restored last-good parameters", reason)
                return TrainResult(params, checkpoints, log, aborted=True, abort_reason=reason)

            log.append(
                {
                    "step": step,
                    "epoch": epoch,
                    "lr": lr,
                    "contrastive": float(contrastive.data),
                    "alignment": align_value,
                    "total": float(loss.data),
                }
            )
            step += 1

            if config.eval_every and val_split and step % config.eval_every == 0:
                log.append({"step": step, "val_r1": _val_r1(params, dataset, val_split, config)})

        checkpoints.append((epoch, _snapshot(params)))
        last_good = checkpoints[-1][1]

    return TrainResult(params, checkpoints, log)


def _val_r1(params: FusionParams, dataset: Dataset, split: str, config: TrainConfig) -> float:
    items = dataset.split_items(split)
    queries = dataset.split_queries(split)
    index = precompute_index(items, params, config.mode, dataset.manifest)
    matrix = score_matrix(index, queries, sharpness=config.sharpness)
    gt = {q.query_id: q.ground_truth_item for q in queries}
    return summary_metrics(matrix, gt)["r1"]


def select_checkpoint(
    checkpoints: list[tuple[int, dict[str, np.ndarray]]],
    params: FusionParams,
    dataset: Dataset,
    val_split: str | None,
    config: TrainConfig,
) -> tuple[int, dict[str, np.ndarray]]:
    """Best validation R@1; ties resolved to the earliest epoch.

    Without a validation split the last checkpoint wins (with a warning);
    peak-test selection is deliberately not the default.
    """
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    if not val_split or not dataset.manifest.splits.get(val_split, {}).get("queries"):
        logger.warning("no validation split: returning the last checkpoint")
        return checkpoints[-1]
    best = None
    best_r1 = -1.0
    for epoch, state in checkpoints:
        _restore(params, state)
        r1 = _val_r1(params, dataset, val_split, config)
        if r1 > best_r1:
            best_r1, best = r1, (epoch, state)
    _restore(params, best[1])
    return best

"""Retrieval metrics (R@k, SumR, mR1), group breakdowns, and latency probing.

Rank handling is pessimistic: the ground truth is placed after every
equal-scored competitor, so degenerate all-tied scores cannot inflate recall.
"""

from __future__ import annotations

import statistics
import time

import numpy as np

from . import nn
from .fusion import FusionMode, VideoIndex
from .similarity import DEFAULT_SHARPNESS, QueryScorer, ScoreMatrix

RECALL_KS = (1, 5, 10)


def rank_of(scores: np.ndarray, gt_index: int) -> int:
    """Pessimistic 1-based rank: 1 + #better + #equal competitors."""
    scores = np.asarray(scores)
    if not 0 <= gt_index < scores.shape[0]:
        raise IndexError(f"ground-truth index {gt_index} outside gallery of {scores.shape[0]}")
    gt_score = scores[gt_index]
    better = int(np.sum(scores > gt_score))
    tied = int(np.sum(scores == gt_score)) - 1  # the ground truth itself
    return 1 + better + tied


def _gt_columns(matrix: ScoreMatrix, ground_truth: dict[str, str]) -> list[int]:
    col_of = {item_id: j for j, item_id in enumerate(matrix.item_ids)}
    cols = []
    for qid in matrix.query_ids:
        if qid not in ground_truth or ground_truth[qid] not in col_of:
            raise ValueError(f"query {qid} lacks a ground-truth column")
        cols.append(col_of[ground_truth[qid]])
    return cols


def ranks_of_matrix(matrix: ScoreMatrix, ground_truth: dict[str, str]) -> np.ndarray:
    cols = _gt_columns(matrix, ground_truth)
    return np.array([rank_of(matrix.values[i], cols[i]) for i in range(len(cols))])


def recall_at_k(matrix: ScoreMatrix, ground_truth: dict[str, str], k: int) -> float:
    ranks = ranks_of_matrix(matrix, ground_truth)
    return float(np.mean(ranks <= k))


def summary_metrics(matrix: ScoreMatrix, ground_truth: dict[str, str]) -> dict[str, float]:
    """R@1/5/10 as fractions plus SumR on the paper-style 0-300 percent scale."""
    if len(matrix.query_ids) == 0:
        raise ValueError("no queries")
    ranks = ranks_of_matrix(matrix, ground_truth)
    out = {f"r{k}": float(np.mean(ranks <= k)) for k in RECALL_KS}
    out["sumr"] = 100.0 * (out["r1"] + out["r5"] + out["r10"])
    return out


def grouped_eval(
    matrix: ScoreMatrix, ground_truth: dict[str, str], groups: dict[str, str | None]
) -> dict[str, dict[str, float]]:
    """Metrics per query group; the full gallery stays as candidates.

    Groups with zero queries are simply absent from the result.
    """
    by_group: dict[str, list[int]] = {}
    for i, qid in enumerate(matrix.query_ids):
        tag = groups.get(qid) or "unknown"
        by_group.setdefault(tag, []).append(i)
    out = {}
    for tag, rows in sorted(by_group.items()):
        sub = ScoreMatrix(
            values=matrix.values[rows],
            query_ids=[matrix.query_ids[i] for i in rows],
            item_ids=matrix.item_ids,
        )
        out[tag] = summary_metrics(sub, ground_truth)
    return out


def mean_r1(runs: list[dict[str, float]]) -> float:
    """mR1: arithmetic mean of R@1 over several evaluation runs."""
    if not runs:
        raise ValueError("no runs")
    return float(np.mean([run["r1"] for run in runs]))


def latency_probe(
    index: VideoIndex,
    queries: list,
    repetitions: int,
    mode: FusionMode | None = None,
    sharpness: float = DEFAULT_SHARPNESS,
) -> dict[str, float]:
    """Wall time for scoring one query against the whole index.

    The probe asserts that no fusion block runs while queries are scored;
    the index is the only video-side artifact touched online.
    """
    if repetitions <= 0:
        raise ValueError("repetitions must be >= 1")
    scorer = QueryScorer(index, index.mode if mode is None else mode, sharpness)
    embeddings = [np.asarray(q.embedding, dtype=np.float64) for q in queries]

    blocks_before = nn.BLOCK_EVAL_COUNTER["count"]
    samples_ms = []
    for _ in range(repetitions):
        for emb in embeddings:
            start = time.perf_counter()
            scorer.score_one(emb)
            samples_ms.append((time.perf_counter() - start) * 1e3)
    blocks_after = nn.BLOCK_EVAL_COUNTER["count"]
    if blocks_after != blocks_before:
        raise RuntimeError("fusion network was evaluated during query scoring")

    return {
        "median_ms": statistics.median(samples_ms),
        "mean_ms": statistics.fmean(samples_ms),
        "min_ms": min(samples_ms),
        "max_ms": max(samples_ms),
        "samples": float(len(samples_ms)),
        "gallery_size": float(len(index.item_ids)),
        "fusion_evals": float(blocks_after - blocks_before),
    }

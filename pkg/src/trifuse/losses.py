"""Training objectives: contrastive retrieval loss and the alignment family.

Alignment distills a constant teacher affinity matrix into the student's
pre-fusion video-audio affinities. The default is the Pearson-distance form
over softmaxed rows and columns; hard (identity-target), filtered-hard, MSE
and Huber variants cover the ablation grid. The teacher matrix never receives
gradient: it enters every loss as a constant.
"""

from __future__ import annotations

import logging
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

logger = logging.getLogger(__name__)

PEARSON_EPS = 1e-8


class AlignKind(str, Enum):
    SOFT_ALBEF = "soft_albef"
    HARD_ALBEF = "hard_albef"
    FILTERED = "filtered"
    MSE = "mse"
    HUBER = "huber"
    NONE = "none"


def affinity_from_teacher(teacher_video: np.ndarray, teacher_audio: np.ndarray) -> np.ndarray:
    """Constant B x B teacher matrix: video_i . audio_j of unit-norm embeddings."""
    tv = np.asarray(teacher_video, dtype=np.float64)
    ta = np.asarray(teacher_audio, dtype=np.float64)
    if tv.shape != ta.shape or tv.ndim != 2:
        raise ValueError(f"teacher stacks must be equal (B, d_t) arrays, got {tv.shape} and {ta.shape}")
    return tv @ ta.T


def student_affinity(pooled_pairs: list[tuple[Tensor, Tensor]]) -> Tensor:
    """B x B matrix of v_mean_i . a_mean_j from pre-fusion pooled embeddings."""
    v_rows = ad.concat([ad.reshape(v, (1, v.shape[0])) for v, _ in pooled_pairs], axis=0)
    a_rows = ad.concat([ad.reshape(a, (1, a.shape[0])) for _, a in pooled_pairs], axis=0)
    return ad.matmul(v_rows, ad.transpose(a_rows))


def _as_constant(x) -> Tensor:
    if isinstance(x, Tensor):
        return x.detach()
    return Tensor(np.asarray(x, dtype=np.float64))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def pearson_row_distance(p, q, eps: float = PEARSON_EPS):
    """1 - corr(p, q), in [0, 2].

    A vector whose standard deviation is at or below `eps` is treated as
    degenerate and contributes distance 0 (and no gradient): a constant
    softmax row only arises from all-equal scores, and penalizing it would
    be arbitrary.
    """
    p = _as_tensor(p)
    q = _as_tensor(q)
    if p.shape != q.shape or p.data.ndim != 1:
        raise ValueError(f"pearson distance needs equal-length vectors, got {p.shape} and {q.shape}")
    pc = p - p.mean()
    qc = q - q.mean()
    sig_p = ad.sqrt((pc * pc).mean())
    sig_q = ad.sqrt((qc * qc).mean())
    if float(sig_p.data) <= eps or float(sig_q.data) <= eps:
        return Tensor(np.asarray(0.0, dtype=p.dtype))
    return 1.0 - ((pc * qc).mean() / (sig_p * sig_q))


def _row(mat: Tensor, i: int) -> Tensor:
    return ad.reshape(ad.narrow(mat, 0, i, 1), (mat.shape[1],))


def _col(mat: Tensor, j: int) -> Tensor:
    return ad.reshape(ad.narrow(mat, 1, j, 1), (mat.shape[0],))


def _check_square_pair(m0: Tensor, m1: Tensor) -> int:
    if m0.shape != m1.shape or m0.data.ndim != 2 or m0.shape[0] != m0.shape[1]:
        raise ValueError(f"affinity matrices must be equal square shapes, got {m0.shape} and {m1.shape}")
    return m0.shape[0]


def soft_albef_loss(m0, m1) -> Tensor:
    """Pearson distance between softmaxed rows and columns of teacher/student.

    (1/b) sum_i d_p(softmax(M0[i,:]), softmax(M1[i,:]))
      + (1/b) sum_j d_p(softmax(M0[:,j]), softmax(M1[:,j]))
    """
    m0 = _as_constant(m0)
    m1 = _as_tensor(m1)
    b = _check_square_pair(m0, m1)
    total = Tensor(np.asarray(0.0, dtype=m1.dtype))
    for i in range(b):
        total = total + pearson_row_distance(ad.softmax(_row(m0, i)), ad.softmax(_row(m1, i)))
    for j in range(b):
        total = total + pearson_row_distance(ad.softmax(_col(m0, j)), ad.softmax(_col(m1, j)))
    return total * (1.0 / b)


def _symmetric_ce(logits: Tensor) -> Tensor:
    """Mean cross-entropy against identity targets, averaged over rows and columns."""
    b = logits.shape[0]
    eye = Tensor(np.eye(b, dtype=logits.dtype))
    row_ce = -(ad.log_softmax(logits, axis=1) * eye).sum() * (1.0 / b)
    col_ce = -(ad.log_softmax(logits, axis=0) * eye).sum() * (1.0 / b)
    return (row_ce + col_ce) * 0.5


def hard_albef_loss(m1, temperature: float = 1.0) -> Tensor:
    """Identity-target symmetric cross-entropy: item i's audio is its positive."""
    m1 = _as_tensor(m1)
    if m1.data.ndim != 2 or m1.shape[0] != m1.shape[1]:
        raise ValueError(f"hard alignment needs a square matrix, got {m1.shape}")
    return _symmetric_ce(m1 * (1.0 / temperature))


def filtered_albef_loss(m1, m0, keep_ratio: float, temperature: float = 1.0) -> Tensor:
    """Hard alignment over the rows whose teacher diagonal survives filtering.

    The bottom (1 - keep_ratio) fraction by M0[i,i] is dropped (ties: lowest
    item index dropped first); rows and columns of the kept submatrix both
    shrink. All rows filtered -> contributes 0 with a diagnostic.
    """
    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    m1 = _as_tensor(m1)
    m0 = _as_constant(m0)
    b = _check_square_pair(m0, m1)
    n_drop = int(round((1.0 - keep_ratio) * b))
    if n_drop == 0:
        return hard_albef_loss(m1, temperature)
    diag = np.diag(m0.data)
    order = sorted(range(b), key=lambda i: (diag[i], i))
    kept = sorted(order[n_drop:])
    if not kept:
        logger.warning("filtered alignment dropped every row (keep_ratio=%s, B=%d)", keep_ratio, b)
        return Tensor(np.asarray(0.0, dtype=m1.dtype))
    rows = ad.concat([ad.narrow(m1, 0, i, 1) for i in kept], axis=0)
    sub = ad.concat([ad.narrow(rows, 1, j, 1) for j in kept], axis=1)
    return _symmetric_ce(sub * (1.0 / temperature))


def _softmax_rows_cols(m0: Tensor, m1: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    return (
        ad.softmax(m0, axis=1),
        ad.softmax(m1, axis=1),
        ad.softmax(m0, axis=0),
        ad.softmax(m1, axis=0),
    )


def mse_align_loss(m0, m1) -> Tensor:
    """Elementwise mean squared difference of softmaxed rows plus columns."""
    m0, m1 = _as_constant(m0), _as_tensor(m1)
    _check_square_pair(m0, m1)
    r0, r1, c0, c1 = _softmax_rows_cols(m0, m1)
    dr = r0 - r1
    dc = c0 - c1
    return (dr * dr).mean() + (dc * dc).mean()


def _huber(diff: Tensor, delta: float) -> Tensor:
    a = ad.absolute(diff)
    quad_mask = Tensor((a.data <= delta).astype(diff.dtype))
    quad = diff * diff * 0.5
    lin = (a - 0.5 * delta) * delta
    return quad * quad_mask + lin * (1.0 - quad_mask)


def huber_align_loss(m0, m1, delta: float = 1.0) -> Tensor:
    """Elementwise mean Huber on the same softmax normalization as the MSE form."""
    m0, m1 = _as_constant(m0), _as_tensor(m1)
    _check_square_pair(m0, m1)
    r0, r1, c0, c1 = _softmax_rows_cols(m0, m1)
    return _huber(r0 - r1, delta).mean() + _huber(c0 - c1, delta).mean()


def contrastive_loss(scores, scale=1.0, margin: float = 0.0) -> Tensor:
    """Symmetric InfoNCE over a square score matrix with diagonal positives.

    `scale` is the positive logit multiplier (exp of the learnable logit
    scale, i.e. 1/temperature); `margin` is subtracted from the positives
    before scaling.
    """
    scores = _as_tensor(scores)
    if scores.data.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ValueError(f"contrastive loss needs a square batch matrix, got {scores.shape}")
    if margin != 0.0:
        scores = scores - Tensor(margin * np.eye(scores.shape[0], dtype=scores.dtype))
    return _symmetric_ce(scores * scale)


def total_loss(contrastive: Tensor, alignment: Tensor | None, align_kind: AlignKind) -> Tensor:
    """Equal-weight combination; `none` drops the alignment term entirely."""
    if AlignKind(align_kind) == AlignKind.NONE or alignment is None:
        return contrastive
    return contrastive + alignment

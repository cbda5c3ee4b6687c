"""Momentum negative queues and the three InfoNCE objectives.

The self-supervised loss contrasts a query against its positive key and every
key in the queue; the fully-supervised variant first drops queue entries that
share the anchor's label (unlabeled entries stay in, they cannot be proven
same-class); the semi-supervised objective routes labeled samples to the
labeled queue with the supervised loss and unlabeled samples to the unlabeled
queue with the self-supervised loss, summing both parts.

All softmax denominators go through max-shifted log-sum-exp in float64, and
every loss evaluation returns the analytic gradient w.r.t. the query
embedding (keys and queue entries are constants).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import EmbeddingBatch, EmbeddingVector, RngStream

UNLABELED = -1


class NegativeQueue:
    """FIFO ring of unit key embeddings with an aligned label ring.

    Slot labels are UNLABELED when the key's sample had no annotation. Writes
    are single-writer between batches; loss evaluations snapshot-read.
    """

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise ValueError(f"capacity and dim must be >= 1, got {capacity}, {dim}")
        self.capacity = capacity
        self.dim = dim
        self.keys = np.zeros((capacity, dim))
        self.labels = np.full(capacity, UNLABELED, dtype=np.int64)
        self.cursor = 0
        self.filled = 0

    @staticmethod
    def random_init(capacity: int, dim: int, rng: RngStream) -> "NegativeQueue":
        """Queue pre-filled with random unit vectors so denominators never start empty."""
        q = NegativeQueue(capacity, dim)
        keys = rng.standard_normal((capacity, dim))
        norms = np.linalg.norm(keys, axis=1, keepdims=True)
        q.keys = keys / norms
        q.filled = capacity
        return q

    def active_keys(self) -> np.ndarray:
        return self.keys[: self.filled]

    def active_labels(self) -> np.ndarray:
        return self.labels[: self.filled]


def queue_push(queue: NegativeQueue, keys: EmbeddingBatch | np.ndarray, labels: np.ndarray) -> NegativeQueue:
    """FIFO-overwrite keys (with aligned labels) at the cursor; returns the queue.

    Keys must be unit-normalized; filled saturates at capacity.
    """
    rows = keys.rows if isinstance(keys, EmbeddingBatch) else np.asarray(keys, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if rows.ndim != 2 or rows.shape[1] != queue.dim:
        raise ValueError(f"keys shape {rows.shape} does not match queue dim {queue.dim}")
    if labels.shape != (rows.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not align with {rows.shape[0]} keys")
    norms = np.linalg.norm(rows, axis=1)
    bad = np.nonzero(np.abs(norms - 1.0) >= 1e-9)[0]
    if bad.size:
        raise ValueError(f"key {bad[0]} is not unit-normalized (|k| = {norms[bad[0]]})")
    for row, label in zip(rows, labels):
        queue.keys[queue.cursor] = row
        queue.labels[queue.cursor] = label
        queue.cursor = (queue.cursor + 1) % queue.capacity
        queue.filled = min(queue.filled + 1, queue.capacity)
    return queue


def filter_negatives(queue: NegativeQueue, anchor_label: int) -> np.ndarray:
    """Indices of filled slots whose label differs from the anchor's.

    UNLABELED slots are included: they cannot be proven same-class, and
    excluding them would silently shrink the loss.
    """
    if anchor_label == UNLABELED:
        raise ValueError("anchor label must be a real label, not UNLABELED")
    return np.nonzero(queue.active_labels() != anchor_label)[0]


@dataclass(frozen=True)
class LabelMask:
    """Supervision state of one sample."""

    labeled: bool
    label: int = UNLABELED

    def __post_init__(self):
        if self.labeled and self.label == UNLABELED:
            raise ValueError("labeled sample needs a real label id")
        if not self.labeled and self.label != UNLABELED:
            raise ValueError("unlabeled sample must carry the UNLABELED sentinel")


@dataclass(frozen=True)
class LossBreakdown:
    """One InfoNCE evaluation: value, positive term, logits, and query gradient."""

    loss: float
    kappa: float  # exp(q . k_pos / tau)
    negative_logits: np.ndarray  # q . k_m / tau over the active negative set
    active_negatives: int
    grad_q: EmbeddingVector


def _check_unit(v: EmbeddingVector, name: str):
    # loose tolerance: finite-difference probes sit just off the unit sphere
    norm = float(np.linalg.norm(v.values))
    if abs(norm - 1.0) > 1e-3:
        raise ValueError(f"{name} must be unit-normalized, |v| = {norm}")


def _info_nce(q: EmbeddingVector, k_pos: EmbeddingVector, negatives: np.ndarray, tau: float) -> LossBreakdown:
    """Shared core: -log(kappa / (kappa + sum exp(neg logits))) plus grad_q.

    With an empty negative set the expression collapses to -log(1) = 0 with a
    zero gradient.
    """
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    _check_unit(q, "query")
    _check_unit(k_pos, "positive key")
    pos_logit = float(np.dot(q.values, k_pos.values)) / tau
    kappa = float(np.exp(pos_logit))
    if negatives.shape[0] == 0:
        zero = EmbeddingVector(np.zeros(q.dim))
        return LossBreakdown(0.0, kappa, np.zeros(0), 0, zero)
    neg_logits = negatives @ q.values / tau
    logits = np.concatenate(([pos_logit], neg_logits))
    shift = logits.max()
    lse = shift + np.log(np.exp(logits - shift).sum())
    loss = float(lse - pos_logit)
    softmax = np.exp(logits - lse)
    # d loss / d q = (sum_j p_j k_j - k_pos) / tau over [positive] + negatives
    weighted = softmax[0] * k_pos.values + softmax[1:] @ negatives
    grad = (weighted - k_pos.values) / tau
    return LossBreakdown(loss, kappa, neg_logits, int(negatives.shape[0]), EmbeddingVector(grad))


def loss_self(q: EmbeddingVector, k_pos: EmbeddingVector, queue: NegativeQueue, tau: float) -> LossBreakdown:
    """Self-supervised InfoNCE over every filled queue slot."""
    if queue.filled == 0:
        raise ValueError("self-supervised loss is undefined with an empty queue")
    return _info_nce(q, k_pos, queue.active_keys(), tau)


def loss_full(
    q: EmbeddingVector, k_pos: EmbeddingVector, queue: NegativeQueue, anchor_label: int, tau: float
) -> LossBreakdown:
    """Fully-supervised InfoNCE: negatives restricted to different-label slots.

    An empty filtered set gives loss 0 with zero gradient (tiny label spaces
    hit this case routinely, so it is handled, not raised).
    """
    if queue.filled == 0:
        raise ValueError("supervised loss is undefined with an empty queue")
    idx = filter_negatives(queue, anchor_label)
    return _info_nce(q, k_pos, queue.active_keys()[idx], tau)


def loss_semi(
    samples: list[tuple[EmbeddingVector, EmbeddingVector, LabelMask]],
    queue_d: NegativeQueue,
    queue_u: NegativeQueue,
    tau: float,
) -> tuple[float, list[LossBreakdown]]:
    """Semi-supervised objective: labeled -> loss_full(queue_d), else loss_self(queue_u).

    Returns the plain left-to-right sum of per-sample losses and each sample's
    breakdown, so the all-labeled / all-unlabeled reductions are bitwise equal
    to summing the corresponding single-sample losses.
    """
    total = 0.0
    breakdowns: list[LossBreakdown] = []
    for i, (q, k_pos, mask) in enumerate(samples):
        if mask.labeled:
            if queue_d.filled == 0:
                raise ValueError(f"sample {i} is labeled but the labeled queue is empty")
            b = loss_full(q, k_pos, queue_d, mask.label, tau)
        else:
            if queue_u.filled == 0:
                raise ValueError(f"sample {i} is unlabeled but the unlabeled queue is empty")
            b = loss_self(q, k_pos, queue_u, tau)
        total += b.loss
        breakdowns.append(b)
    return total, breakdowns


def loss_grad_check(loss_fn, q: EmbeddingVector, h: float = 1e-5) -> float:
    """Max relative error between analytic grad_q and central finite differences.

    loss_fn maps an EmbeddingVector to a LossBreakdown. Differences are taken
    in ambient space (no re-projection onto the unit sphere); perturbed
    queries keep their normalized flag so the loss accepts them, which is
    sound because the loss formula itself never renormalises.
    """
    analytic = loss_fn(q).grad_q.values
    fd = np.zeros_like(analytic)
    for i in range(q.dim):
        probe = np.zeros_like(q.values)
        probe[i] = h
        up = EmbeddingVector(q.values + probe)
        down = EmbeddingVector(q.values - probe)
        fd[i] = (loss_fn(up).loss - loss_fn(down).loss) / (2.0 * h)
    denom = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(fd)))
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - fd)) / denom

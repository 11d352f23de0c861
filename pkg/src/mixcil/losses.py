"""Training losses: supervised contrastive over a key queue, plus
cross-entropy over the expanded label space.

The contrastive term treats the online-view projections as anchors and
the momentum-view projections plus a FIFO queue of past keys as the
candidate set. For anchor j with positives S(j) (candidates sharing its
expanded label) the per-anchor loss is

    -(1/|S(j)|) * sum over k+ in S(j) of
        log( exp(z_j . z_k+ / tau) / sum over all candidates k' of exp(z_j . z_k' / tau) )

and the batch loss is the mean over anchors with at least one positive;
anchors with none contribute nothing. Gradients flow into the anchors
only, never into keys or queue entries.
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    matmul,
    scale,
    soft_target_cross_entropy,
    softmax_cross_entropy,
)

_UNIT_TOL = 1e-6


class FeatureQueue:
    """Fixed-capacity FIFO of unit-norm key rows and their labels.

    ``embeddings`` and ``labels`` hold the current contents oldest
    first. Pushing past capacity evicts the oldest rows.
    """

    def __init__(self, capacity: int, width: int) -> None:
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        if width < 1:
            raise ValueError(f"width must be >= 1, got {width}")
        self.capacity = int(capacity)
        self.width = int(width)
        self.embeddings = np.zeros((0, width), dtype=np.float64)
        self.labels = np.zeros(0, dtype=np.int64)

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    def push(self, keys, labels) -> None:
        kv = keys.values if isinstance(keys, Tensor) else np.asarray(keys, dtype=np.float64)
        lv = np.asarray(labels, dtype=np.int64)
        if kv.ndim != 2 or kv.shape[1] != self.width:
            raise ShapeError(f"expected keys of shape [n, {self.width}], got {kv.shape}")
        if lv.shape != (kv.shape[0],):
            raise ShapeError("need one label per key row")
        if kv.shape[0] == 0:
            return
        norms = np.linalg.norm(kv, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-9:
            raise ValueError("queue keys must have unit L2 norm")
        self.embeddings = np.vstack([self.embeddings, kv])[-self.capacity :]
        self.labels = np.concatenate([self.labels, lv])[-self.capacity :]


def queue_push(queue: FeatureQueue, keys, key_labels) -> FeatureQueue:
    """FIFO append; returns the queue for call chaining."""
    queue.push(keys, key_labels)
    return queue


def _check_unit_rows(values: np.ndarray, what: str) -> None:
    if values.shape[0] == 0:
        return
    norms = np.linalg.norm(values, axis=1)
    if np.max(np.abs(norms - 1.0)) > _UNIT_TOL:
        raise ValueError(f"{what} must have unit L2 norm rows")


def sscl_loss(
    anchors: Tensor,
    keys,
    anchor_labels,
    key_labels,
    queue: FeatureQueue | None,
    tau: float,
) -> Tensor:
    """Supervised contrastive loss of anchors against keys plus queue."""
    if tau <= 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    if anchors.values.ndim != 2:
        raise ShapeError(f"anchors must be 2-d, got shape {anchors.shape}")
    kv = keys.values if isinstance(keys, Tensor) else np.asarray(keys, dtype=np.float64)
    a_labels = np.asarray(anchor_labels, dtype=np.int64)
    k_labels = np.asarray(key_labels, dtype=np.int64)
    if a_labels.shape != (anchors.shape[0],):
        raise ShapeError("need one label per anchor row")
    if kv.ndim != 2 or kv.shape[1] != anchors.shape[1]:
        raise ShapeError(f"keys width {kv.shape} must match anchors {anchors.shape}")
    if k_labels.shape != (kv.shape[0],):
        raise ShapeError("need one label per key row")
    _check_unit_rows(anchors.values, "anchors")
    _check_unit_rows(kv, "keys")

    if queue is not None and len(queue) > 0:
        if queue.width != anchors.shape[1]:
            raise ShapeError(f"queue width {queue.width} must match anchors {anchors.shape}")
        candidates = np.vstack([kv, queue.embeddings])
        cand_labels = np.concatenate([k_labels, queue.labels])
    else:
        candidates = kv
        cand_labels = k_labels
    if candidates.shape[0] == 0:
        raise ShapeError("contrastive loss needs at least one candidate")

    logits = scale(matmul(anchors, Tensor(candidates.T)), 1.0 / tau)
    mask = (cand_labels[None, :] == a_labels[:, None]).astype(np.float64)
    counts = mask.sum(axis=1)
    weights = np.divide(mask, counts[:, None], out=np.zeros_like(mask), where=counts[:, None] > 0)
    return soft_target_cross_entropy(logits, weights)


def class_loss(logits: Tensor, proxy_labels) -> Tensor:
    """Cross-entropy of classifier logits against expanded labels."""
    return softmax_cross_entropy(logits, proxy_labels)


def joint_loss(classification: Tensor, contrastive: Tensor) -> Tensor:
    """Unweighted sum of the two scalar training terms."""
    if classification.values.shape != () or contrastive.values.shape != ():
        raise ShapeError("joint_loss needs two scalar terms")
    return add(classification, contrastive)

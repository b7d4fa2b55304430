"""
Training objectives and the negative-sample memory queue.

- masked_mse: reconstruction error over masked patches only
- info_nce: contrastive loss against a FIFO queue of negatives
- cross_entropy: supervised loss for the fine-tuning classifier
"""

from typing import Sequence, Union

import numpy as np

from .config import NegativeMode
from .errors import (
    EmptyMaskSetError,
    EmptyQueueError,
    LabelOutOfRangeError,
    NonUnitNormError,
    ShapeMismatchError,
    ZeroTemperatureError,
)
from .microtensor import Tensor, ops
from .patching import MaskPlan, PatchGrid, partition_patches

UNIT_NORM_TOL = 1e-9


class MemoryQueue:
    """
    Fixed-capacity FIFO ring buffer of unit-norm embeddings.

    Owned by the server fine-tuning loop; never shared between workers.
    """

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError(f"Queue capacity must be at least 1, got {capacity}")
        self.capacity = capacity
        self.dim = dim
        self._buffer = np.zeros((capacity, dim))
        self._size = 0
        self._cursor = 0

    def __len__(self) -> int:
        return self._size

    @property
    def full(self) -> bool:
        return self._size == self.capacity

    def entries(self) -> np.ndarray:
        """Stored vectors, oldest first."""
        if self._size < self.capacity:
            return self._buffer[: self._size].copy()
        return np.roll(self._buffer, -self._cursor, axis=0)

    def push(self, batch) -> "MemoryQueue":
        """Append in order, evicting the oldest entries beyond capacity. In place."""
        vectors = np.asarray(batch.data if isinstance(batch, Tensor) else batch, dtype=np.float64)
        if vectors.size == 0:
            return self
        if vectors.ndim == 1:
            vectors = vectors[None, :]
        if vectors.shape[1] != self.dim:
            raise ShapeMismatchError(f"Queue holds {self.dim}-dim vectors, got {vectors.shape[1]}")
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            raise NonUnitNormError("Queue entries must have unit norm")
        for v in vectors:
            self._buffer[self._cursor] = v
            self._cursor = (self._cursor + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)
        return self

    def copy(self) -> "MemoryQueue":
        clone = MemoryQueue(self.capacity, self.dim)
        clone._buffer = self._buffer.copy()
        clone._size = self._size
        clone._cursor = self._cursor
        return clone

    def __eq__(self, other) -> bool:
        if not isinstance(other, MemoryQueue):
            return NotImplemented
        return self.capacity == other.capacity and np.array_equal(self.entries(), other.entries())


def queue_push(queue: MemoryQueue, batch) -> MemoryQueue:
    """Functional push: returns a new queue, `queue` is left as it was."""
    return queue.copy().push(batch)


def masked_mse(
    pred: Tensor,
    target,
    plans: Union[MaskPlan, Sequence[MaskPlan]],
    grid: PatchGrid,
) -> Tensor:
    """
    Mean over masked patches of the per-patch pixel-mean squared error.

    Batched inputs average the per-image losses. Only masked patches of
    `pred` are gathered, so unmasked pixels receive no gradient.
    """
    pred = ops.as_tensor(pred)
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"pred {pred.shape} vs target {target.shape}")
    if pred.ndim == 3:
        pred = pred.reshape(1, *pred.shape)
        target = target[None]
    batch = pred.shape[0]
    if isinstance(plans, MaskPlan):
        plans = [plans] * batch
    if len(plans) != batch:
        raise ShapeMismatchError(f"{len(plans)} mask plans for a batch of {batch}")

    r, d = grid.num_patches, grid.patch_dim
    index, weight = [], []
    for b, plan in enumerate(plans):
        if plan.num_patches != r:
            raise ShapeMismatchError(f"Mask plan covers {plan.num_patches} patches, grid has {r}")
        if not plan.masked:
            raise EmptyMaskSetError("Masked MSE is undefined without masked patches")
        index.extend(b * r + j for j in plan.masked)
        weight.extend([1.0 / (batch * len(plan.masked))] * len(plan.masked))
    index = np.asarray(index, dtype=np.int64)

    pred_patches = partition_patches(pred, grid.patch_size).reshape(batch * r, d)
    target_patches = partition_patches(target, grid.patch_size).data.reshape(batch * r, d)
    diff = ops.sub(ops.gather(pred_patches, index, axis=0), target_patches[index])
    per_patch = ops.mean(ops.square(diff), axis=1)
    return ops.sum(ops.mul(per_patch, np.asarray(weight)))


def nce_from_similarities(
    positive: Tensor,
    negatives: Tensor,
    temperature: float,
    mode: NegativeMode = NegativeMode.WITH_POSITIVE,
) -> Tensor:
    """
    Batch-mean InfoNCE from cosine similarities.

    positive is (B,), negatives is (B, N). With-positive mode keeps the
    positive pair in the denominator; negatives-only mode drops it.
    """
    if temperature <= 0:
        raise ZeroTemperatureError(f"Temperature must be positive, got {temperature}")
    positive, negatives = ops.as_tensor(positive), ops.as_tensor(negatives)
    inv_t = 1.0 / temperature
    pos = ops.scale(positive, inv_t)
    neg = ops.scale(negatives, inv_t)
    if NegativeMode(mode) == NegativeMode.WITH_POSITIVE:
        logits = ops.concat([pos.reshape(-1, 1), neg], axis=1)
        per_sample = ops.sub(ops.logsumexp(logits), pos)
    else:
        per_sample = ops.sub(ops.logsumexp(neg), pos)
    return ops.mean(per_sample)


def info_nce(
    q_plus: Tensor,
    q_plusplus,
    queue: MemoryQueue,
    temperature: float,
    mode: NegativeMode = NegativeMode.WITH_POSITIVE,
) -> Tensor:
    """
    -log( e^{cos(q+, q++)/mu} / (e^{cos(q+, q++)/mu} + sum_neg e^{cos(q+, q-)/mu}) ).

    Accepts single embeddings or (B, D) batches; the batch mean is returned.
    `q_plusplus` is treated as a constant.
    """
    if temperature <= 0:
        raise ZeroTemperatureError(f"Temperature must be positive, got {temperature}")
    if len(queue) == 0:
        raise EmptyQueueError("InfoNCE needs at least one negative in the queue")
    q_plus = ops.as_tensor(q_plus)
    target = q_plusplus.data if isinstance(q_plusplus, Tensor) else np.asarray(q_plusplus, dtype=np.float64)
    if q_plus.ndim == 1:
        q_plus = q_plus.reshape(1, -1)
        target = target.reshape(1, -1)
    if q_plus.shape != target.shape:
        raise ShapeMismatchError(f"q+ {q_plus.shape} vs q++ {target.shape}")

    negatives = queue.entries()
    positive = ops.cosine_similarity(q_plus, target)
    b, d = q_plus.shape
    negative = ops.cosine_similarity(q_plus.reshape(b, 1, d), negatives[None, :, :])
    return nce_from_similarities(positive, negative, temperature, mode)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean -log softmax(logits)[label]."""
    logits = ops.as_tensor(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    b, num_classes = logits.shape
    if labels.shape != (b,):
        raise ShapeMismatchError(f"{labels.shape[0]} labels for {b} logit rows")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise LabelOutOfRangeError(f"Labels must lie in [0, {num_classes})")
    flat = ops.log_softmax(logits).reshape(b * num_classes)
    picked = ops.gather(flat, np.arange(b) * num_classes + labels, axis=0)
    return ops.scale(ops.mean(picked), -1.0)

"""
Server-side consistency training.

The online network (encoder + projector, plus an online-only predictor)
learns by gradient; the target network trails it by exponential moving
average and feeds the memory queue. One server step:

    q+  = predictor(projector(encoder(view+)))      online, with gradient
    q++ = projector(encoder(view++))                target, no gradient
    loss = mean InfoNCE(q+, q++, queue)
    optimizer step on online, EMA on target, push q++ into the queue
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .config import ArchConfig, AugmentSpec, NegativeMode
from .errors import EmptyBatchError, ShapeMismatchError
from .logging import get_logger
from .microtensor import Graph, ModelParams, Optimizer, Tensor, no_grad
from .patching import augment
from .ssl_losses import MemoryQueue, info_nce
from .swinlite import ENCODER, PREDICTOR, PROJECTOR, encode_images, predict_head, project_head

logger = get_logger("contrastive")


@dataclass
class TwinNetworks:
    """Online/target pair with identical names and shapes; target is EMA-only."""
    online: ModelParams
    target: ModelParams
    predictor: ModelParams
    decay: float = 0.99

    @classmethod
    def from_params(cls, params: ModelParams, decay: float = 0.99) -> "TwinNetworks":
        online = params.section(ENCODER, PROJECTOR).copy()
        return cls(
            online=online,
            target=online.frozen(),
            predictor=params.section(PREDICTOR).copy(),
            decay=decay,
        )

    def trainable(self) -> ModelParams:
        """Online branch and predictor, sharing tensors with this pair."""
        return self.online.merged(self.predictor)

    def encoder(self) -> ModelParams:
        return self.online.section(ENCODER)


@dataclass
class ViewPair:
    plus: Tensor
    plusplus: Tensor
    source_id: int = 0


def make_views(source, spec: AugmentSpec, rng: np.random.Generator, source_id: int = 0) -> ViewPair:
    """Two independent augmentation draws of one image."""
    return ViewPair(plus=augment(source, spec, rng), plusplus=augment(source, spec, rng), source_id=source_id)


def ema_update(twins: TwinNetworks) -> TwinNetworks:
    """target <- decay * target + (1 - decay) * online, in place; online untouched."""
    theta = twins.decay
    if twins.target.names() != twins.online.names():
        raise ShapeMismatchError("Online and target networks hold different tensors")
    for name, q in twins.target.items():
        phi = twins.online[name]
        if q.shape != phi.shape:
            raise ShapeMismatchError(f"{name}: target {q.shape} vs online {phi.shape}")
        q.data = theta * q.data + (1.0 - theta) * phi.data
    return twins


def target_embeddings(twins: TwinNetworks, images, arch: ArchConfig) -> np.ndarray:
    with no_grad():
        return project_head(encode_images(images, twins.target, arch), twins.target).data


def warm_queue(twins: TwinNetworks, images: np.ndarray, queue: MemoryQueue, arch: ArchConfig,
               batch_size: int = 64) -> MemoryQueue:
    """Fill the queue with target embeddings of `images` (one gradient-free pass)."""
    for start in range(0, len(images), batch_size):
        queue.push(target_embeddings(twins, images[start: start + batch_size], arch))
    if not queue.full:
        logger.warning(f"Queue warm-up filled {len(queue)}/{queue.capacity} slots")
    return queue


def server_contrastive_step(
    twins: TwinNetworks,
    pairs: Sequence[ViewPair],
    queue: MemoryQueue,
    temperature: float,
    optimizer: Optimizer,
    arch: ArchConfig,
    lr: float,
    negatives: NegativeMode = NegativeMode.WITH_POSITIVE,
):
    """
    One online update, one EMA update and one queue push.

    `optimizer` must be bound to ``twins.trainable()``. Returns
    ``(twins, queue, loss)`` with the loss as a float.
    """
    if not pairs:
        raise EmptyBatchError("Contrastive step needs at least one view pair")
    plus = np.stack([p.plus.data for p in pairs])
    plusplus = np.stack([p.plusplus.data for p in pairs])

    q_target = target_embeddings(twins, plusplus, arch)
    trainable = twins.trainable()
    trainable.zero_grad()
    with Graph() as graph:
        q_online = predict_head(project_head(encode_images(plus, twins.online, arch), twins.online), twins.predictor)
        loss = info_nce(q_online, q_target, queue, temperature, negatives)
    graph.backward(loss, leaves=trainable.trainable().values())

    optimizer.step(trainable.grads(), lr)
    ema_update(twins)
    queue.push(q_target)
    return twins, queue, loss.item()


def build_view_pairs(
    sources: np.ndarray,
    spec: AugmentSpec,
    rngs: Sequence[np.random.Generator],
    source_ids: Optional[Sequence[int]] = None,
) -> List[ViewPair]:
    """One ViewPair per source image, each drawn from its own stream."""
    ids = list(source_ids) if source_ids is not None else list(range(len(sources)))
    return [make_views(src, spec, rng, sid) for src, rng, sid in zip(sources, rngs, ids)]

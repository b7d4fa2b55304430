"""
Client side of the protocol.

Each client owns a private shard and a private ModelParams. A local round
starts from the weights the server sent, trains, and returns an update
record carrying only the sections that get aggregated:

- local_pretrain: masked reconstruction on unlabeled images, uploads
  encoder (+ decoder when shared)
- local_finetune: classifier stacked on the encoder, cross-entropy on the
  labeled subset, uploads the encoder only; the classifier stays local
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from .config import ArchConfig, AugmentSpec, MaskingConfig, OptimConfig
from .datalab import Dataset
from .errors import EmptyLabeledShardError, EmptyShardError
from .logging import get_logger
from .microtensor import Graph, ModelParams, build_optimizer, no_grad
from .patching import PatchGrid, augment, sample_mask, window_groups
from .ssl_losses import cross_entropy, masked_mse
from .swinlite import CLASSIFIER, DECODER, ENCODER, classify, encode_images, reconstruct

logger = get_logger("client")


@dataclass
class ClientState:
    """One simulated client: shards, local weights and participation count."""
    client_id: int
    unlabeled: Dataset  # every shard image, labels hidden
    labeled: Dataset
    params: ModelParams
    frequency: int = 0  # rounds in which this client's update was aggregated

    def size(self, phase: int) -> int:
        """n_t: unlabeled shard size in phase 1, labeled subset size in phase 2."""
        return len(self.unlabeled) if phase == 1 else len(self.labeled)


@dataclass
class PretrainUpdate:
    """Result of one local pre-training round."""
    client_id: int
    params: ModelParams
    num_samples: int
    frequency: int
    losses: List[float] = field(default_factory=list)

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.losses)) if self.losses else float("nan")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "client_id": self.client_id,
            "num_samples": self.num_samples,
            "frequency": self.frequency,
            "mean_loss": self.mean_loss,
            "upload_bytes": self.params.nbytes,
        }


@dataclass
class FinetuneUpdate:
    """Result of one local fine-tuning round; params hold the encoder only."""
    client_id: int
    params: ModelParams
    num_samples: int
    frequency: int
    losses: List[float] = field(default_factory=list)
    initial_accuracy: float = 0.0
    accuracy: float = 0.0

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.losses)) if self.losses else float("nan")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "client_id": self.client_id,
            "num_samples": self.num_samples,
            "frequency": self.frequency,
            "mean_loss": self.mean_loss,
            "initial_accuracy": self.initial_accuracy,
            "accuracy": self.accuracy,
            "upload_bytes": self.params.nbytes,
        }


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start: start + batch_size]


def _augmented(images: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment(img, spec, rng).data for img in images])


def local_pretrain(
    client: ClientState,
    global_params: ModelParams,
    arch: ArchConfig,
    masking: MaskingConfig,
    augment_spec: AugmentSpec,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    optim: Optional[OptimConfig] = None,
    share_decoder: bool = True,
) -> PretrainUpdate:
    """
    Masked-autoencoder training on the client's unlabeled shard.

    Loads `global_params` (encoder + decoder) into the client's weights,
    then for every batch: augment, mask, reconstruct, masked MSE, step.
    """
    data = client.unlabeled
    if len(data) == 0:
        raise EmptyShardError(f"Client {client.client_id} has no unlabeled samples")
    optim = optim or OptimConfig()

    client.params.load_(global_params)
    local = client.params.section(ENCODER, DECODER)
    optimizer = build_optimizer(optim.name, local, optim.weight_decay, optim.betas)
    grid = PatchGrid(arch.image_size, arch.image_size, arch.channels, arch.patch_size)
    windows = window_groups(grid.rows, grid.cols, arch.window_at(0)) if masking.stratified else None

    losses: List[float] = []
    for _ in range(epochs):
        for idx in _batches(len(data), batch_size, rng):
            images = _augmented(data.images[idx], augment_spec, rng)
            plans = [sample_mask(grid.num_patches, masking.ratio, rng, windows) for _ in idx]
            local.zero_grad()
            with Graph() as graph:
                recon = reconstruct(images, plans, local, arch)
                loss = masked_mse(recon, images, plans, grid)
            graph.backward(loss, leaves=local.trainable().values())
            optimizer.step(local.grads(), lr)
            losses.append(loss.item())

    upload = client.params.section(ENCODER, DECODER) if share_decoder else client.params.section(ENCODER)
    logger.debug(
        f"Client {client.client_id} pretrained {len(losses)} steps",
        extra={"phase": 1, "client_id": client.client_id, "loss": float(np.mean(losses))},
    )
    return PretrainUpdate(
        client_id=client.client_id,
        params=upload.copy(),
        num_samples=client.size(1),
        frequency=client.frequency,
        losses=losses,
    )


def classifier_accuracy(images: np.ndarray, labels: np.ndarray, params: ModelParams, arch: ArchConfig,
                        batch_size: int = 64) -> float:
    """Accuracy of the stacked encoder + classifier, gradient-free."""
    if len(images) == 0:
        return 0.0
    correct = 0
    with no_grad():
        for start in range(0, len(images), batch_size):
            logits = classify(encode_images(images[start: start + batch_size], params, arch), params)
            correct += int((logits.data.argmax(axis=-1) == labels[start: start + batch_size]).sum())
    return correct / len(images)


def local_finetune(
    client: ClientState,
    global_encoder: ModelParams,
    arch: ArchConfig,
    augment_spec: AugmentSpec,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    optim: Optional[OptimConfig] = None,
) -> FinetuneUpdate:
    """
    Supervised round on the labeled subset with the private classifier.

    The encoder starts from `global_encoder`; the classifier continues from
    the client's last local state. Only the encoder is returned.
    """
    data = client.labeled
    if len(data) == 0:
        raise EmptyLabeledShardError(f"Client {client.client_id} has no labeled samples")
    optim = optim or OptimConfig()

    client.params.load_(global_encoder)
    local = client.params.section(ENCODER, CLASSIFIER)
    optimizer = build_optimizer(optim.name, local, optim.weight_decay, optim.betas)
    initial = classifier_accuracy(data.images, data.labels, local, arch)

    losses: List[float] = []
    for _ in range(epochs):
        for idx in _batches(len(data), batch_size, rng):
            images = _augmented(data.images[idx], augment_spec, rng)
            local.zero_grad()
            with Graph() as graph:
                logits = classify(encode_images(images, local, arch), local)
                loss = cross_entropy(logits, data.labels[idx])
            graph.backward(loss, leaves=local.trainable().values())
            optimizer.step(local.grads(), lr)
            losses.append(loss.item())

    return FinetuneUpdate(
        client_id=client.client_id,
        params=client.params.section(ENCODER).copy(),
        num_samples=client.size(2),
        frequency=client.frequency,
        losses=losses,
        initial_accuracy=initial,
        accuracy=classifier_accuracy(data.images, data.labels, local, arch),
    )

"""
Optimizers and learning-rate schedules.

Two implementations:
- SGD: the plain local update w <- w - lr * grad
- AdamW: Adam with decoupled weight decay, torch-style defaults
"""

import math
from abc import ABC, abstractmethod
from typing import Dict, Mapping, Tuple

import numpy as np

from ..errors import MissingGradientError, NonFiniteError
from .params import ModelParams


class Optimizer(ABC):
    """
    Abstract base for parameter updates.

    An optimizer is bound to one ModelParams and updates its trainable
    tensors in place. Non-trainable tensors are never touched.
    """

    def __init__(self, params: ModelParams):
        self.params = params
        self.steps = 0

    def _checked(self, grads: Mapping[str, np.ndarray], lr: float) -> Dict[str, np.ndarray]:
        if lr < 0:
            raise ValueError(f"Learning rate must be non-negative, got {lr}")
        checked = {}
        for name, t in self.params.trainable().items():
            if name not in grads:
                raise MissingGradientError(name)
            g = np.asarray(grads[name], dtype=np.float64)
            if g.shape != t.shape:
                g = np.broadcast_to(g, t.shape)
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"{type(self).__name__.lower()}_step", f"Non-finite gradient for {name}")
            checked[name] = g
        return checked

    @abstractmethod
    def step(self, grads: Mapping[str, np.ndarray], lr: float) -> None:
        """Apply one update using `grads` keyed by parameter name."""
        ...


class SGD(Optimizer):
    def step(self, grads: Mapping[str, np.ndarray], lr: float) -> None:
        grads = self._checked(grads, lr)
        for name, g in grads.items():
            t = self.params[name]
            t.data = t.data - lr * g
        self.steps += 1


class AdamW(Optimizer):
    """Adam with decoupled weight decay (Loshchilov & Hutter)."""

    def __init__(
        self,
        params: ModelParams,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        super().__init__(params)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}

    def step(self, grads: Mapping[str, np.ndarray], lr: float) -> None:
        grads = self._checked(grads, lr)
        b1, b2 = self.betas
        self.steps += 1
        c1 = 1.0 - b1 ** self.steps
        c2 = 1.0 - b2 ** self.steps
        for name, g in grads.items():
            t = self.params[name]
            m = b1 * self._m.get(name, 0.0) + (1.0 - b1) * g
            v = b2 * self._v.get(name, 0.0) + (1.0 - b2) * g * g
            self._m[name], self._v[name] = m, v
            decayed = t.data * (1.0 - lr * self.weight_decay)
            t.data = decayed - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def sgd_step(params: ModelParams, grads: Mapping[str, np.ndarray], lr: float) -> ModelParams:
    """One plain gradient step, in place. Returns `params` for chaining."""
    SGD(params).step(grads, lr)
    return params


def build_optimizer(
    name: str,
    params: ModelParams,
    weight_decay: float = 0.05,
    betas: Tuple[float, float] = (0.9, 0.999),
) -> Optimizer:
    name = str(getattr(name, "value", name))
    if name == "sgd":
        return SGD(params)
    if name == "adamw":
        return AdamW(params, betas=tuple(betas), weight_decay=weight_decay)
    raise ValueError(f"Unknown optimizer: {name}")


def lr_at(
    round_index: int,
    total_rounds: int,
    base_lr: float,
    warmup_rounds: int = 0,
    schedule: str = "cosine",
    min_ratio: float = 0.0,
) -> float:
    """
    Learning rate for a communication round.

    Linear warmup over the first `warmup_rounds`, then cosine decay from
    `base_lr` down to `min_ratio * base_lr` at the last round.
    """
    schedule = str(getattr(schedule, "value", schedule))
    if warmup_rounds > 0 and round_index < warmup_rounds:
        return base_lr * (round_index + 1) / warmup_rounds
    if schedule == "constant":
        return base_lr
    span = max(1, total_rounds - warmup_rounds - 1)
    progress = min(1.0, max(0.0, (round_index - warmup_rounds) / span))
    floor = base_lr * min_ratio
    return floor + (base_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))

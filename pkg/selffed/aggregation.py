"""
Server aggregation rules.

    fedavg               w_t = n_t / n
    selffed-literal      w_t = (n_t / n) * beta**F_t        (no normalizer)
    selffed-normalized   w_t = n_t * beta**F_t / sum_s n_s * beta**F_s

At beta = 1 both selffed modes compute exactly the FedAvg weights, so
their aggregates are bit-identical to FedAvg's.

Updates are reduced in the order given; the federation sorts them by
client id first so parallel and sequential runs sum identically.
"""

from typing import Sequence, Tuple, Union

import numpy as np

from .config import AggregationMode
from .errors import BetaOutOfRangeError, EmptyUpdateSetError, ShapeMismatchError
from .microtensor import ModelParams


def aggregation_weights(
    sizes: Sequence[int],
    frequencies: Sequence[int],
    beta: float,
    mode: Union[AggregationMode, str] = AggregationMode.SELFFED_NORMALIZED,
) -> np.ndarray:
    """Effective per-client weights for one round."""
    mode = AggregationMode(mode)
    if not len(sizes):
        raise EmptyUpdateSetError("No updates to aggregate")
    if not 0.0 < beta <= 1.0:
        raise BetaOutOfRangeError(f"beta must lie in (0, 1], got {beta}")
    n = np.asarray(sizes, dtype=np.float64)
    if mode == AggregationMode.FEDAVG:
        return n / n.sum()
    decay = beta ** np.asarray(frequencies, dtype=np.float64)
    if mode == AggregationMode.SELFFED_LITERAL:
        return (n / n.sum()) * decay
    raw = n * decay
    return raw / raw.sum()


def weighted_sum(params: Sequence[ModelParams], weights: Sequence[float]) -> ModelParams:
    """Elementwise sum_t w_t * params_t, accumulated in list order."""
    if not params:
        raise EmptyUpdateSetError("No updates to aggregate")
    first = params[0]
    names = first.names()
    for p in params[1:]:
        if p.names() != names:
            raise ShapeMismatchError("Updates hold different tensor sets")
        for name in names:
            if p[name].shape != first[name].shape:
                raise ShapeMismatchError(f"{name}: {p[name].shape} vs {first[name].shape}")

    out = ModelParams()
    for name in names:
        acc = weights[0] * params[0][name].data
        for w, p in zip(weights[1:], params[1:]):
            acc = acc + w * p[name].data
        out.add(name, acc, trainable=first[name].requires_grad)
    return out


def aggregate_fedavg(updates: Sequence[Tuple[ModelParams, int]]) -> ModelParams:
    """Dataset-size-weighted mean of client parameters."""
    if not updates:
        raise EmptyUpdateSetError("No updates to aggregate")
    params = [u[0] for u in updates]
    weights = aggregation_weights([u[1] for u in updates], [0] * len(updates), 1.0, AggregationMode.FEDAVG)
    return weighted_sum(params, weights)


def aggregate_selffed(
    updates: Sequence[Tuple[ModelParams, int, int]],
    beta: float,
    mode: Union[AggregationMode, str] = AggregationMode.SELFFED_NORMALIZED,
) -> ModelParams:
    """Frequency-decayed aggregation of (params, size, frequency) updates."""
    if not updates:
        raise EmptyUpdateSetError("No updates to aggregate")
    weights = aggregation_weights([u[1] for u in updates], [u[2] for u in updates], beta, mode)
    return weighted_sum([u[0] for u in updates], weights)

"""
Central finite-difference gradient checking.

Used by the test suite to hold every primitive and composite to the
reverse-mode gradients it records.
"""

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Graph, Tensor, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """||a - n|| / max(||a|| + ||n||, floor)."""
    diff = float(np.linalg.norm(np.ravel(analytic) - np.ravel(numeric)))
    scale = float(np.linalg.norm(np.ravel(analytic)) + np.linalg.norm(np.ravel(numeric)))
    return diff / max(scale, floor)


def numerical_gradient(
    fn: Callable[[], Tensor],
    tensor: Tensor,
    eps: float = 1e-5,
    entries: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    d fn() / d tensor by central differences.

    If `entries` (flat indices) is given, only those coordinates are differenced
    and the rest of the returned array is left at zero.
    """
    tensor.data = np.ascontiguousarray(tensor.data)
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    indices = range(flat.size) if entries is None else entries
    with no_grad():
        for i in indices:
            original = flat[i]
            flat[i] = original + eps
            plus = fn().item()
            flat[i] = original - eps
            minus = fn().item()
            flat[i] = original
            gflat[i] = (plus - minus) / (2.0 * eps)
    return grad


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """
    Largest relative error between recorded and finite-difference gradients.

    `fn` must rebuild the scalar loss from `inputs` on every call. With
    `max_entries`, a random subset of each input's coordinates is checked.
    """
    with Graph() as graph:
        loss = fn()
    graph.backward(loss, leaves=inputs)

    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        entries = None
        if max_entries is not None and t.size > max_entries:
            entries = rng.choice(t.size, size=max_entries, replace=False)
        numeric = numerical_gradient(fn, t, eps=eps, entries=entries)
        analytic = t.grad
        if entries is not None:
            analytic = analytic.reshape(-1)[entries]
            numeric = numeric.reshape(-1)[entries]
        worst = max(worst, relative_error(analytic, numeric))
    return worst

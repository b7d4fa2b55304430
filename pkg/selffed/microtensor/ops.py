"""
Primitive catalog.

Each primitive computes its forward value in float64 with numpy and records
a closure that maps the output gradient to input gradients. Composite
layers (attention, layer norm with affine, heads, losses) are built only
from these.
"""

import math
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import NormalizationError, ShapeMismatchError
from .tensor import Tensor, record

Operand = Union[Tensor, np.ndarray, float, int]

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def as_tensor(x: Operand) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out the axes numpy broadcasting added or stretched."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(kind: str, *tensors: Tensor) -> None:
    try:
        np.broadcast_shapes(*(t.shape for t in tensors))
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeMismatchError(f"{kind}: cannot broadcast {shapes}") from None


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# -- elementwise arithmetic -------------------------------------------------

def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", (a, b), a.data + b.data, backward)


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record("sub", (a, b), a.data - b.data, backward)


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record("mul", (a, b), a.data * b.data, backward)


def scale(a: Operand, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        return (g * c,)

    return record("scale", (a,), a.data * c, backward)


def square(a: Operand) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (2.0 * a.data * g,)

    return record("square", (a,), a.data * a.data, backward)


def log(a: Operand) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return record("log", (a,), out, backward)


def exp(a: Operand) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return record("exp", (a,), out, backward)


def where(cond: np.ndarray, a: Operand, b: Operand) -> Tensor:
    """Select from `a` where the constant mask is true, else from `b`."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    try:
        out_shape = np.broadcast_shapes(cond.shape, a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"where: cannot broadcast {cond.shape}, {a.shape}, {b.shape}") from None

    def backward(g):
        zero = np.zeros(out_shape)
        return (
            _unbroadcast(np.where(cond, g, zero), a.shape),
            _unbroadcast(np.where(cond, zero, g), b.shape),
        )

    return record("where", (a, b), np.where(cond, a.data, b.data), backward)


# -- activations ------------------------------------------------------------

def relu(a: Operand) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * (a.data > 0),)

    return record("relu", (a,), np.maximum(a.data, 0.0), backward)


def gelu(a: Operand) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_C * (x + _GELU_K * x ** 3))

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return record("gelu", (a,), 0.5 * x * (1.0 + t), backward)


def softmax(a: Operand) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = np.exp(a.data - a.data.max(axis=-1, keepdims=True))
    s = z / z.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return record("softmax", (a,), s, backward)


def log_softmax(a: Operand) -> Tensor:
    """Numerically stable log-softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return record("log_softmax", (a,), out, backward)


def layer_norm(a: Operand, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv_std * (g - gm - xhat * gx),)

    return record("layer_norm", (a,), xhat, backward)


# -- linear algebra and reductions ------------------------------------------

def matmul(a: Operand, b: Operand) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatchError(f"matmul: batch axes {a.shape} vs {b.shape}") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record("matmul", (a, b), np.matmul(a.data, b.data), backward)


def sum(a: Operand, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record("sum", (a,), a.data.sum(axis=axes, keepdims=keepdims), backward)


def mean(a: Operand, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return record("mean", (a,), a.data.mean(axis=axes, keepdims=keepdims), backward)


def cosine_similarity(a: Operand, b: Operand) -> Tensor:
    """Cosine similarity along the last axis, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("cosine_similarity", a, b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeMismatchError(f"cosine_similarity: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a.data, axis=-1, keepdims=True)
    nb = np.linalg.norm(b.data, axis=-1, keepdims=True)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise NormalizationError("cosine_similarity of a zero vector")
    ua, ub = a.data / na, b.data / nb
    c = (ua * ub).sum(axis=-1, keepdims=True)

    def backward(g):
        g = g[..., None]
        ga = g * (ub - c * ua) / na
        gb = g * (ua - c * ub) / nb
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record("cosine_similarity", (a, b), c[..., 0], backward)


def l2_normalize(a: Operand) -> Tensor:
    """Scale each last-axis slice to unit Euclidean norm."""
    a = as_tensor(a)
    n = np.linalg.norm(a.data, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise NormalizationError("Cannot normalize a zero vector")
    y = a.data / n

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / n,)

    return record("l2_normalize", (a,), y, backward)


# -- data movement ----------------------------------------------------------

def reshape(a: Operand, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchError(f"reshape: {a.shape} -> {shape}") from None

    def backward(g):
        return (g.reshape(a.shape),)

    return record("reshape", (a,), out, backward)


def transpose(a: Operand, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    if axes is None or len(axes) == 0:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeMismatchError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return record("transpose", (a,), np.transpose(a.data, axes), backward)


def gather(a: Operand, index, axis: int = 0) -> Tensor:
    """Select entries by an integer index set along `axis`; backward scatter-adds."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    axis = axis % a.ndim
    extent = a.shape[axis]
    if index.size and (index.min() < -extent or index.max() >= extent):
        raise ShapeMismatchError(f"gather: index out of range for axis {axis} of {a.shape}")

    def backward(g):
        grad = np.zeros_like(a.data)
        target = np.moveaxis(grad, axis, 0)
        src = np.moveaxis(g, list(range(axis, axis + index.ndim)), list(range(index.ndim)))
        np.add.at(target, index, src)
        return (grad,)

    return record("gather", (a,), np.take(a.data, index, axis=axis), backward)


def concat(tensors: Sequence[Operand], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    if not parts:
        raise ShapeMismatchError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in parts], axis=axis)
    except ValueError as e:
        raise ShapeMismatchError(f"concat: {e}") from None
    bounds = np.cumsum([t.shape[axis] for t in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", parts, out, backward)


# -- dispatch ---------------------------------------------------------------

PRIMITIVES: Dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "square": square,
    "log": log,
    "exp": exp,
    "where": where,
    "relu": relu,
    "gelu": gelu,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "layer_norm": layer_norm,
    "matmul": matmul,
    "sum": sum,
    "mean": mean,
    "cosine_similarity": cosine_similarity,
    "l2_normalize": l2_normalize,
    "reshape": reshape,
    "transpose": transpose,
    "gather": gather,
    "concat": concat,
}


def eval_primitive(kind: str, *inputs, **attrs) -> Tensor:
    """Apply a primitive by name, e.g. ``eval_primitive("matmul", a, b)``."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"Unknown primitive: {kind}") from None
    return fn(*inputs, **attrs)


def logsumexp(a: Operand) -> Tensor:
    """log(sum(exp(a))) over the last axis, shifted by a constant for stability."""
    a = as_tensor(a)
    shift = a.data.max(axis=-1, keepdims=True)
    return add(log(sum(exp(sub(a, shift)), axis=-1)), shift[..., 0])


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight) if x.ndim >= 2 else reshape(matmul(reshape(x, (1, -1)), weight), (weight.shape[-1],))
    if bias is not None:
        out = add(out, bias)
    return out

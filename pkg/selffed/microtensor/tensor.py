"""
Tensor and tape graph.

A Tensor wraps a float64 numpy array and an optional gradient buffer.
Primitives executed while a Graph is active (``with Graph() as g:``) are
appended to that graph's tape in execution order, so the tape is already
topologically sorted. Outside any graph, primitives only compute values;
this is how target-network passes stay gradient-free.

The active graph lives in a ContextVar, so every worker thread (and every
asyncio.to_thread call) sees only the graph it opened itself.
"""

from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import GraphNotEvaluatedError, NonFiniteError, NotScalarLossError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_active_graph: ContextVar[Optional["Graph"]] = ContextVar("selffed_active_graph", default=None)


class Tensor:
    """Dense float64 array with an optional gradient of identical shape."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def wrap(cls, data: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """Adopt an array without copying it."""
        t = cls.__new__(cls)
        t.data = data if data.dtype == np.float64 else data.astype(np.float64)
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor.wrap(self.data.copy())

    # Operators delegate to the primitive catalog.

    def __add__(self, other) -> "Tensor":
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other) -> "Tensor":
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other) -> "Tensor":
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other) -> "Tensor":
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return self.__mul__(other)

    def __truediv__(self, other) -> "Tensor":
        from . import ops
        if not isinstance(other, (int, float)):
            raise TypeError("Tensor division is only defined for scalar divisors")
        return ops.scale(self, 1.0 / float(other))

    def __neg__(self) -> "Tensor":
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other) -> "Tensor":
        from . import ops
        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    """One tape record: which primitive produced `output` from `inputs`."""
    id: int
    kind: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward_fn: BackwardFn


class Graph:
    """
    Eager tape of primitive applications.

    Rebuilt for every step; never cached. Confined to the worker that
    created it.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self._token = None

    def __enter__(self) -> "Graph":
        self._token = _active_graph.set(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        _active_graph.reset(self._token)
        self._token = None

    def append(self, kind: str, inputs: Tuple[Tensor, ...], output: Tensor, backward_fn: BackwardFn) -> Node:
        node = Node(id=len(self.nodes), kind=kind, inputs=inputs, output=output, backward_fn=backward_fn)
        self.nodes.append(node)
        return node

    def leaves(self) -> List[Tensor]:
        """Trainable tensors consumed by the tape but not produced by it."""
        produced = {id(n.output) for n in self.nodes}
        seen = set()
        found = []
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced and id(t) not in seen:
                    seen.add(id(t))
                    found.append(t)
        return found

    def backward(self, loss: Tensor, leaves: Optional[Iterable[Tensor]] = None) -> Dict[int, np.ndarray]:
        """
        Reverse-accumulate d(loss)/d(leaf) for every leaf.

        Sets ``leaf.grad`` and returns the gradients keyed by ``id(leaf)``.
        Tensors listed in `leaves` that the loss does not depend on get an
        exact zero gradient.
        """
        if loss.size != 1:
            raise NotScalarLossError(f"Loss must be scalar, got shape {loss.shape}")

        start = None
        for node in reversed(self.nodes):
            if node.output is loss:
                start = node.id
                break
        if start is None:
            raise GraphNotEvaluatedError("Loss tensor was not produced by this graph")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes[: start + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            input_grads = node.backward_fn(g)
            for tensor, gi in zip(node.inputs, input_grads):
                if gi is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi

        result: Dict[int, np.ndarray] = {}
        targets = list(self.leaves())
        if leaves is not None:
            known = {id(t) for t in targets}
            targets.extend(t for t in leaves if id(t) not in known)
        for leaf in targets:
            g = grads.get(id(leaf))
            if g is None:
                g = np.zeros_like(leaf.data)
            elif g.shape != leaf.shape:
                g = np.broadcast_to(g, leaf.shape).copy()
            leaf.grad = g
            result[id(leaf)] = g
        return result


def backward(graph: Graph, loss: Tensor, leaves: Optional[Iterable[Tensor]] = None) -> Dict[int, np.ndarray]:
    """Functional form of Graph.backward."""
    return graph.backward(loss, leaves)


def active_graph() -> Optional[Graph]:
    return _active_graph.get()


@contextmanager
def no_grad() -> Iterator[None]:
    """Run primitives without recording them, even inside a Graph."""
    token = _active_graph.set(None)
    try:
        yield
    finally:
        _active_graph.reset(token)


def record(kind: str, inputs: Tuple[Tensor, ...], data: np.ndarray, backward_fn: BackwardFn) -> Tensor:
    """Wrap a primitive's output and append it to the active tape."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(kind)
    out = Tensor.wrap(np.asarray(data, dtype=np.float64))
    graph = _active_graph.get()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.append(kind, inputs, out, backward_fn)
    return out

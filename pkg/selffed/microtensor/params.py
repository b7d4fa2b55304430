"""
ModelParams: a named, ordered tensor collection and its binary container.

Container layout (all integers little-endian):

    b"SFWT" | version u32
    repeated until EOF:
        name length u32 | UTF-8 name | rank u32 | extents u64 * rank | data f64 * prod(extents)
"""

import struct
from pathlib import Path
from typing import Dict, Iterator, Mapping, Optional, Tuple, Union

import numpy as np

from ..errors import SerializationError, ShapeMismatchError
from .tensor import Tensor

MAGIC = b"SFWT"
VERSION = 1


class ModelParams:
    """
    Ordered mapping of dotted names to Tensors.

    Names are dotted paths (``encoder.stages.0.blocks.0.attn.q.weight``);
    sections are selected by prefix. Sections share Tensors with their
    parent, copies do not.
    """

    def __init__(self, tensors: Optional[Mapping[str, Tensor]] = None):
        self._tensors: Dict[str, Tensor] = dict(tensors or {})

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"Duplicate parameter name: {name}")
        t = Tensor(data, requires_grad=trainable, name=name)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def section(self, *prefixes: str) -> "ModelParams":
        """Tensors whose name starts with any of `prefixes` (shared, not copied)."""
        return ModelParams({
            name: t for name, t in self._tensors.items()
            if any(name == p or name.startswith(p + ".") for p in prefixes)
        })

    def merged(self, other: "ModelParams") -> "ModelParams":
        out = dict(self._tensors)
        out.update(other._tensors)
        return ModelParams(out)

    def copy(self) -> "ModelParams":
        return ModelParams({
            name: Tensor(t.data, requires_grad=t.requires_grad, name=name)
            for name, t in self._tensors.items()
        })

    def frozen(self) -> "ModelParams":
        """Copy whose tensors never receive gradients."""
        return ModelParams({
            name: Tensor(t.data, requires_grad=False, name=name)
            for name, t in self._tensors.items()
        })

    def load_(self, other: "ModelParams") -> "ModelParams":
        """Overwrite values in place from `other` for every name both hold."""
        for name, src in other.items():
            if name not in self._tensors:
                continue
            dst = self._tensors[name]
            if dst.shape != src.shape:
                raise ShapeMismatchError(f"{name}: {dst.shape} vs {src.shape}")
            dst.data = src.data.copy()
        return self

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self._tensors.items()}

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: t.shape for name, t in self._tensors.items()}

    def trainable(self) -> Dict[str, Tensor]:
        return {name: t for name, t in self._tensors.items() if t.requires_grad}

    def grads(self) -> Dict[str, np.ndarray]:
        """Current gradients of trainable tensors (zeros where none was set)."""
        return {
            name: t.grad if t.grad is not None else np.zeros_like(t.data)
            for name, t in self._tensors.items() if t.requires_grad
        }

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    @property
    def num_parameters(self) -> int:
        return int(sum(t.size for t in self._tensors.values()))

    @property
    def nbytes(self) -> int:
        return int(sum(t.data.nbytes for t in self._tensors.values()))

    def equal(self, other: "ModelParams") -> bool:
        """Bitwise equality of names, shapes and values."""
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[n].data, other[n].data) for n in self.names())

    def max_abs_diff(self, other: "ModelParams") -> float:
        return max(
            (float(np.max(np.abs(self[n].data - other[n].data))) for n in self.names() if self[n].size),
            default=0.0,
        )

    def __repr__(self) -> str:
        return f"ModelParams({len(self)} tensors, {self.num_parameters} values)"


def params_to_bytes(params: ModelParams) -> bytes:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, t in params.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", t.ndim))
        chunks.append(struct.pack(f"<{t.ndim}Q", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(chunks)


def params_from_bytes(blob: bytes) -> ModelParams:
    if blob[:4] != MAGIC:
        raise SerializationError("Not a SFWT container (bad magic)")
    if len(blob) < 8:
        raise SerializationError("Truncated header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise SerializationError(f"Unsupported container version {version}")

    params = ModelParams()
    offset = 8
    try:
        while offset < len(blob):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset: offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, offset)
            offset += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            end = offset + 8 * count
            if end > len(blob):
                raise SerializationError(f"Truncated data for tensor {name}")
            data = np.frombuffer(blob[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
            offset = end
            params.add(name, data)
    except struct.error as e:
        raise SerializationError(f"Truncated record: {e}") from None
    return params


def save_params(params: ModelParams, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(params_to_bytes(params))
    return path


def load_params(path: Union[str, Path]) -> ModelParams:
    return params_from_bytes(Path(path).read_bytes())

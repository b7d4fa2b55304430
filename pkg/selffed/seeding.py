"""
Seeded random streams.

Every stochastic step draws from a numpy Generator derived from the
experiment seed plus a tuple of keys (phase, round, client id, image id, …).
Streams with different keys are independent; the same keys always give the
same stream, whatever order the streams are created in.
"""

import zlib
from typing import Union

import numpy as np

Key = Union[int, str]


def _key_to_int(key: Key) -> int:
    if isinstance(key, (bool, np.bool_)):
        return int(key)
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"Stream keys must be non-negative, got {key}")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def derive_rng(seed: int, *keys: Key) -> np.random.Generator:
    """Return the Generator for (seed, *keys)."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_to_int(k) for k in keys))
    return np.random.default_rng(seq)

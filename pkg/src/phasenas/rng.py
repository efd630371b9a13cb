"""Counter-based random streams.

Every random draw in the package comes from a Philox generator whose key is
derived from ``(seed, *path)``. Streams are stateless with respect to each
other: drawing from one never shifts another, so candidates can be scored in
any order or on any thread without changing results.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, *path: int | str) -> int:
    """Stable 64-bit integer derived from a seed and a path of labels."""
    h = hashlib.blake2b(digest_size=8)
    h.update((int(seed) & _MASK64).to_bytes(8, "little"))
    for part in path:
        h.update(b"\x1f")
        h.update(str(part).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def stream(seed: int, *path: int | str) -> np.random.Generator:
    key = [int(seed) & _MASK64, derive_seed(seed, *path)]
    return np.random.Generator(np.random.Philox(key=key))


def normal(seed: int, path: tuple[int | str, ...], shape: tuple[int, ...], dtype=np.float32) -> np.ndarray:
    return stream(seed, *path).standard_normal(shape, dtype=dtype)

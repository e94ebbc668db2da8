"""Counter-based random streams.

Every stochastic routine in the package draws from a named Philox substream of a
single integer master seed.  Streams are identified by a purpose tag plus an
integer index (trajectory number, bundle number, ...), so ensembles are
reproducible under any execution schedule: stream `i` produces the same numbers
whether it is generated first, last, or concurrently.

Derivation: the Philox key is the first 128 bits of SHA-256(master || tag); the
stream index is planted in the highest counter word, leaving 2^192 draws of
headroom per stream before any overlap.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(master_seed: int, tag: str) -> np.ndarray:
    """128-bit Philox key for (master seed, purpose tag), as two uint64 words."""
    digest = hashlib.sha256(f"{master_seed}:{tag}".encode()).digest()
    return np.frombuffer(digest[:16], dtype=np.uint64).copy()


def substream(master_seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """Independent Generator for stream `index` of purpose `tag`."""
    if index < 0:
        raise ValueError(f"stream index must be >= 0, got {index}")
    counter = np.zeros(4, dtype=np.uint64)
    counter[3] = np.uint64(index)
    return np.random.Generator(
        np.random.Philox(key=stream_key(master_seed, tag), counter=counter)
    )


def spawn_uint64(gen: np.random.Generator, n: int) -> np.ndarray:
    """n raw uint64 words from `gen` (bit material for dyadic registers)."""
    return gen.integers(0, 2**64, size=n, dtype=np.uint64)

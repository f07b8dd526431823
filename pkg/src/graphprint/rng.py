"""Deterministic random streams built on the Philox counter-based generator.

Every random draw in the package comes from a named stream derived from a
user seed plus a tuple of integer path components (e.g. ``(seed, "identity",
17)``). Philox is a counter-based 64-bit generator whose output is fixed by
its 128-bit key alone, so identical seeds reproduce identical datasets,
batches, and initializations on every platform. Keys are derived from the
seed/path with a splitmix64-style hash chain, which makes streams
independent of each other.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(state: int) -> int:
    # Standard splitmix64 finalizer; good avalanche, cheap, portable.
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_key(seed: int, *path: int | str) -> tuple[int, int]:
    """Fold a seed and a stream path into a 128-bit Philox key."""
    acc = _splitmix64(seed & _MASK64)
    for part in path:
        if isinstance(part, str):
            for byte in part.encode("utf-8"):
                acc = _splitmix64(acc ^ byte)
        else:
            acc = _splitmix64(acc ^ (int(part) & _MASK64))
    hi = _splitmix64(acc)
    lo = _splitmix64(hi)
    return hi, lo


def stream(seed: int, *path: int | str) -> np.random.Generator:
    """Return an independent Generator for the given seed and stream path."""
    hi, lo = derive_key(seed, *path)
    key = np.array([hi, lo], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))

"""Counter-based random streams.

Every draw in a run is addressed by ``(root, domain, a, b)``.  The root seed is
the Philox key and the remaining coordinates occupy the high words of the
256-bit counter, so streams never overlap unless one of them produces more
than 2**64 blocks.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# domain tags
CLIENT = 0
OUTPUT = 1
PROBLEM = 2
ORACLE = 3
REPETITION = 4


def stream(root: int, domain: int = ORACLE, a: int = 0, b: int = 0) -> np.random.Generator:
    """Return the generator for address ``(root, domain, a, b)``."""
    for v in (root, domain, a, b):
        if int(v) < 0:
            raise ValueError(f"stream coordinates must be non-negative, got {v}")
    root = int(root)
    key = np.array([root & _MASK64, (root >> 64) & _MASK64], dtype=np.uint64)
    counter = np.array([0, int(b), int(a), int(domain)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def derive_seed(root: int, *path: int) -> int:
    """Hash ``(root, *path)`` into a fresh 63-bit seed (used for repetition lineage)."""
    ss = np.random.SeedSequence([int(root), *[int(p) for p in path]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))

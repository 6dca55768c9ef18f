"""Deterministic seed derivation.

Every source of randomness in the pipeline draws from a Generator seeded by
a stable hash of (parent seed, purpose, item id). Parallel and serial runs
therefore agree, and re-running one stage never perturbs its siblings.
"""

import hashlib

import numpy as np


def stable_seed(*parts) -> int:
    """Collapse a tuple of ints/strings into a stable 64-bit seed."""
    key = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(*parts) -> np.random.Generator:
    """Fresh PCG64 generator for the given seed path."""
    return np.random.Generator(np.random.PCG64(stable_seed(*parts)))

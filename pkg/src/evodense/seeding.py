"""Stable seed derivation so parallelism and resume cannot change results."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Map an arbitrary tuple of labels to a stable 64-bit seed.

    Uses SHA-256 over the string form of the parts, so the result is
    identical across processes and Python invocations (unlike ``hash``).
    """
    material = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(*parts) -> np.random.Generator:
    """Fresh PCG64 generator keyed by the given labels."""
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))

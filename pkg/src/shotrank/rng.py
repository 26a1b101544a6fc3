"""Deterministic, portable random streams.

Every source of randomness in the package is a Philox-4x64-10 counter-based
generator keyed by SHA-256 of ``"<root_seed>/<label>/<label>/..."``.  Philox
is fully specified by its constants, so a given (seed, labels) pair yields
the same byte stream on every platform, and adding a new consumer label never
perturbs existing streams.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(root_seed: int, *labels: object) -> tuple[int, int]:
    """128-bit Philox key derived from a root seed and a label path."""
    text = str(int(root_seed)) + "".join("/" + str(lab) for lab in labels)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return (
        int.from_bytes(digest[:8], "little"),
        int.from_bytes(digest[8:16], "little"),
    )


def stream(root_seed: int, *labels: object) -> np.random.Generator:
    """Independent generator for one named consumer."""
    key = np.array(derive_key(root_seed, *labels), dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))

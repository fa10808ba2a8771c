"""Deterministic keyed randomness.

Every stochastic operation in the toolkit draws from a counter-based
generator keyed by a hash of its inputs, so results are reproducible and
independent of evaluation order or parallelism.
"""

from __future__ import annotations

import hashlib

import numpy as np


def key_digest(*parts: object) -> bytes:
    """SHA-256 digest of the parts, each rendered to a canonical byte string."""
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, bytes):
            h.update(b"b:")
            h.update(part)
        else:
            h.update(b"s:")
            h.update(str(part).encode("utf-8"))
        h.update(b"\x00")
    return h.digest()


def seeded_generator(*parts: object) -> np.random.Generator:
    """Philox generator keyed by the given parts.

    Philox is counter-based: streams for distinct keys are independent,
    and the same key always reproduces the same draws.
    """
    digest = key_digest(*parts)
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))

"""Deterministic seed derivation.

Derived seeds live in ``[2**32, 2**63)`` so they never collide with small
hand-picked seeds such as the averaging set ``{8000, 8001, 8002}``.
"""
from __future__ import annotations

import hashlib

import numpy as np

_LOW = 2**32


def _as_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & (2**64 - 1)
    digest = hashlib.sha256(str(key).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(*keys) -> int:
    """Hash an arbitrary tuple of ints/strings into a simulator seed."""
    ss = np.random.SeedSequence([_as_int(k) for k in keys])
    hi, lo = ss.generate_state(2, dtype=np.uint32)
    value = (int(hi) << 32 | int(lo)) % (2**63 - _LOW - 2**20)
    return _LOW + value

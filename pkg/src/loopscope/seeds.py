"""Deterministic sub-seed derivation from one master seed."""

from __future__ import annotations

import hashlib


def derive_seed(master_seed: int, *labels) -> int:
    """Stable 63-bit seed derived from the master seed and string labels."""
    key = ":".join([str(master_seed)] + [str(x) for x in labels])
    digest = hashlib.sha256(key.encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF

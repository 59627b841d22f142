"""Deterministic seed fan-out: one master seed, per-component streams."""
from __future__ import annotations

import hashlib


def seed_for(master: int, label: str) -> int:
    """Derive a child seed from (master, label) via a fixed hash schedule."""
    digest = hashlib.sha256(f"{master}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)

"""Deterministic sub-seed derivation.

A run takes one master seed; every consumer (data generation, weight init,
attack sampling, pairing, ...) gets its own named stream so adding a consumer
never shifts the draws of another.
"""

from __future__ import annotations

import hashlib

SUBSEED_NAMES = ("data", "init", "attack", "pairing", "steg", "noise", "perm", "eval")


def subseed(master: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(master)}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")

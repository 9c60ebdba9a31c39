"""Seed hierarchy: one root seed fans out to named per-component child seeds.

Every source of randomness in the pipeline derives its seed through
``child_seed(root, label)`` so that a single ``--seed`` flag pins the whole
run. The derivation is a hash, not an offset, so adding a new component
never perturbs the streams of existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np


def child_seed(root_seed: int, label: str) -> int:
    """Derive a deterministic 32-bit child seed from a root seed and a label."""
    digest = hashlib.sha256(f"{root_seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def child_rng(root_seed: int, label: str) -> np.random.Generator:
    """A numpy Generator seeded from the hierarchy."""
    return np.random.default_rng(child_seed(root_seed, label))

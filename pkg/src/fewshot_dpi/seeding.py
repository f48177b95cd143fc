"""Seed derivation and config hashing.

All randomness descends from one root seed. A stage seed is
``SeedSequence([root, crc32(label_1), crc32(label_2), ...])`` reduced to a
63-bit integer, so ``derive_seed(7, "pretrain", "iter0")`` is stable across
platforms and runs.
"""

from __future__ import annotations

import hashlib
import json
import zlib

import numpy as np

STAGES = ("ingest", "pretrain", "fewshot", "crypto")


def derive_seed(root: int, *labels: str | int) -> int:
    entropy = [int(root) & 0xFFFFFFFFFFFFFFFF] + [zlib.crc32(str(label).encode()) for label in labels]
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def rng_for(root: int, *labels: str | int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *labels))


def config_hash(obj) -> str:
    """First 16 hex digits of the SHA-256 of ``obj`` as canonical JSON."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]

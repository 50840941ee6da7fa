"""Deterministic random streams keyed by (master seed, scenario, replicate, purpose).

Every stochastic step draws from its own generator so results do not depend
on how replicates are scheduled across workers.
"""

from __future__ import annotations

import json
import zlib

import numpy as np


def stable_key(obj) -> int:
    """32-bit key from a JSON-serialisable object (stable across processes)."""
    if isinstance(obj, int):
        return obj & 0xFFFFFFFF
    text = obj if isinstance(obj, str) else json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return zlib.crc32(text.encode("utf-8"))


def stream(master_seed: int, scenario, replicate: int, purpose, attempt: int = 0) -> np.random.Generator:
    seq = np.random.SeedSequence(
        int(master_seed),
        spawn_key=(stable_key(scenario), int(replicate), stable_key(purpose), int(attempt)),
    )
    return np.random.Generator(np.random.PCG64(seq))

"""Counter-based random streams keyed by integer tuples.

Every consumer derives its own Philox stream from a key such as
``(seed, patient, core, STREAM_ID)``, so draws never depend on call order
and are reproducible across platforms.
"""
from __future__ import annotations

import numpy as np


def stream(*key: int) -> np.random.Generator:
    """Independent Philox generator for ``key`` (non-negative ints)."""
    if any(int(k) < 0 for k in key):
        raise ValueError(f"stream keys must be non-negative, got {key}")
    ss = np.random.SeedSequence([int(k) for k in key])
    return np.random.Generator(np.random.Philox(ss))

"""Named random streams on the counter-based Philox-4x64 generator.

A stream is ``Philox(key=[seed, stream_id])`` with counter zero, wrapped in a
numpy ``Generator``.  The key pair is enough to reproduce a stream in any
language with a Philox-4x64-10 implementation.
"""

from __future__ import annotations

from enum import IntEnum

import numpy as np


class Stream(IntEnum):
    PRETRAIN = 1
    OBSERVER_INIT = 2
    POLICY_INIT = 3
    CLONE = 4
    ROLLOUT = 5
    PREFIX = 6
    EVALUATION = 7
    PIRATE = 1000  # pirate trial i uses PIRATE + i


def stream(seed: int, stream_id: int) -> np.random.Generator:
    if seed < 0 or stream_id < 0:
        raise ValueError("seed and stream id must be non-negative")
    return np.random.Generator(np.random.Philox(key=[int(seed), int(stream_id)]))


def describe(seed: int) -> dict:
    """Stream keys used for ``seed`` (recorded in run manifests)."""
    return {s.name.lower(): [int(seed), int(s)] for s in Stream}

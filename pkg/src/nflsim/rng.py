"""Named, independent random streams derived from one scenario seed.

Every consumer asks for its own stream (plus integer sub-keys such as the
round and client id), so toggling one feature never shifts the draws seen
by another and parallel client updates stay reproducible.
"""
from __future__ import annotations

import numpy as np

STREAMS = {
    "sampling": 1,
    "noise": 2,
    "data": 3,
    "init": 4,
}


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    if name not in STREAMS:
        raise KeyError(f"unknown random stream {name!r}")
    ss = np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name],) + tuple(int(k) for k in keys))
    return np.random.default_rng(ss)

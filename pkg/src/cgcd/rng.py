"""Seeded random substreams.

All randomness in a run funnels through one base seed; each consumer gets an
independent named stream so toggling one feature (say, replay sampling) never
shifts the draws seen by another (say, batch shuffling).
"""

from __future__ import annotations

import zlib

import numpy as np

# fixed ids for the streams the engine owns
_STREAMS = {
    "init": 1,
    "shuffle": 2,
    "kmeans": 3,
    "augment": 4,
    "replay": 5,
    "split": 6,
    "synthetic": 7,
    "silhouette": 8,
}


def _key_part(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    if isinstance(part, str):
        if part in _STREAMS:
            return _STREAMS[part]
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"substream key parts must be str or int, got {type(part)!r}")


def substream(seed: int, *key) -> np.random.Generator:
    """Generator for the (seed, *key) stream; same inputs, same stream."""
    spawn_key = tuple(_key_part(p) for p in key)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key))

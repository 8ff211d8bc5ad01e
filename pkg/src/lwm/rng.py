"""Deterministic derivation of independent random substreams.

A single master seed fans out into named streams (init, masking, shuffling,
dropout, ...) so that consumers never share generator state. Streams keyed by
sample index can therefore be drawn in any order, or in parallel, without
changing results.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_word(tag) -> int:
    if isinstance(tag, str):
        return zlib.crc32(tag.encode("utf-8"))
    return int(tag) & 0xFFFFFFFF


def substream(master_seed: int, *tags) -> np.random.Generator:
    """Return a generator unique to (master_seed, *tags).

    Tags may be strings (stream names) or integers (epoch, sample index).
    """
    seed = int(master_seed)
    words = [seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF]
    words.extend(_tag_word(t) for t in tags)
    return np.random.default_rng(np.random.SeedSequence(words))

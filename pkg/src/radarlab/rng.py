"""Named, reproducible random substreams derived from one master seed."""
from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("training", "data", "attack", "key", "miss-rate", "random-attack")


def substream_seed(master_seed: int, name: str, *index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed), zlib.crc32(name.encode()), *map(int, index)])


def substream(master_seed: int, name: str, *index: int) -> np.random.Generator:
    """Generator for stream ``name`` (optionally round ``index``) of ``master_seed``.

    Streams are keyed by name, so adding a new stream never shifts the draws
    of an existing one.
    """
    return np.random.default_rng(substream_seed(master_seed, name, *index))


def derived_int(master_seed: int, name: str, *index: int) -> int:
    return int(substream_seed(master_seed, name, *index).generate_state(1)[0])

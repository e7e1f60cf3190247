"""Named random streams derived from one global seed."""

import zlib
from typing import Iterable

import numpy as np

STREAMS = ("policy", "init", "basis", "data", "scaling", "ntk", "train", "study")


def derive_seed(seed: int, stream: str, *index: int) -> int:
    """Derive a 32-bit seed for a named stream.

    Args:
        seed: Global run seed.
        stream: Stream name, e.g. "init" or "policy".
        *index: Optional sub-indices (candidate number, init repeat, ...).

    Returns:
        Non-negative integer seed, stable across platforms and runs.
    """
    key = _spawn_key(stream, index)
    return int(np.random.SeedSequence(entropy=int(seed), spawn_key=key).generate_state(1)[0])


def generator(seed: int, stream: str, *index: int) -> np.random.Generator:
    """Return a numpy Generator for a named stream."""
    return np.random.default_rng(derive_seed(seed, stream, *index))


def _spawn_key(stream: str, index: Iterable[int]) -> tuple:
    return (zlib.crc32(stream.encode("utf-8")),) + tuple(int(i) for i in index)

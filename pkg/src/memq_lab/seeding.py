"""Deterministic seed splitting.

All randomness in the package is drawn from streams keyed by
``(root seed, component name, index...)``.  The component name is hashed with
CRC32 into the first word of a :class:`numpy.random.SeedSequence` spawn key,
the integer indices fill the rest.  Streams therefore do not depend on the
order in which they are requested, which keeps parallel schedules
bit-reproducible.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def component_key(component: str) -> int:
    return zlib.crc32(component.encode("utf-8"))


def stream(root: int, component: str, *index: int) -> np.random.SeedSequence:
    """Return the seed sequence for ``component`` at ``index`` under ``root``."""
    key = (component_key(component),) + tuple(int(i) for i in index)
    if any(k < 0 for k in key):
        raise ValueError(f"stream indices must be non-negative, got {index}")
    return np.random.SeedSequence(entropy=int(root) & _MASK64, spawn_key=key)


def make_rng(root: int, component: str, *index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(stream(root, component, *index)))


def derive_int(root: int, component: str, *index: int) -> int:
    """A 63-bit integer seed for APIs that take plain integers."""
    word = stream(root, component, *index).generate_state(2, dtype=np.uint32)
    return int((int(word[0]) << 32 | int(word[1])) & ((1 << 63) - 1))

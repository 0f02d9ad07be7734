"""Seeded random streams.

All randomness derives from one root seed. A stream is addressed by a tuple of
labels (strings or integers); each label is hashed to a 32-bit word and used as
the ``spawn_key`` of a :class:`numpy.random.SeedSequence`, and the resulting
entropy drives a PCG64 bit generator. The same (seed, labels) pair yields the
same stream on every platform and numpy release that keeps PCG64 stable.
"""

from __future__ import annotations

import zlib

import numpy as np


def _label_word(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8"))


def stream(seed: int, *labels) -> np.random.Generator:
    """Independent generator for ``labels`` under root ``seed``."""
    key = tuple(_label_word(lab) for lab in labels)
    ss = np.random.SeedSequence(int(seed) & ((1 << 64) - 1), spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))


def complex_normal(rng: np.random.Generator, shape, variance: float = 1.0) -> np.ndarray:
    """Circular complex Gaussian samples with E|z|^2 = variance."""
    scale = np.sqrt(variance / 2.0)
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    return scale * (re + 1j * im)

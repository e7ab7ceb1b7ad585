"""Seeded random streams.

Every stream is a numpy ``Generator`` driven by the PCG64 bit generator,
keyed by a ``SeedSequence`` built from the run seed plus integer stream
tags.  PCG64 and SeedSequence are fully specified algorithms, so streams
do not depend on the platform or on the OS entropy source.
"""

import hashlib
import struct

import numpy as np

MASK64 = (1 << 64) - 1


def make_rng(seed, *tags):
    """Return an independent generator for ``(seed, *tags)``."""
    entropy = [int(seed) & MASK64] + [int(t) & MASK64 for t in tags]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def hashed_uniform(seed, tag, values):
    """Uniform number in (0, 1) derived from a point's bytes.

    Used where a draw must depend on *what* a point is rather than *where*
    it sits in an array.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<QQ", int(seed) & MASK64, int(tag) & MASK64))
    h.update(np.ascontiguousarray(values, dtype="<f8").tobytes())
    word = int.from_bytes(h.digest(), "little")
    return ((word >> 11) + 0.5) * 2.0**-53

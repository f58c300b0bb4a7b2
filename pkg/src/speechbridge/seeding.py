"""Named deterministic random substreams derived from one root seed."""

import zlib

import numpy as np


def substream(seed, *names):
    """Generator for a named substream of ``seed``.

    The same (seed, names) always yields the same stream, and distinct
    names yield independent streams, so e.g. data generation and K-sampling
    can be varied independently.
    """
    key = tuple(zlib.crc32(str(n).encode("utf-8")) for n in names)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))

"""Deterministic random streams.

Every random draw in the package comes from a Philox counter-based generator
keyed by (seed, stream tag, step).  Streams are independent of call order and
of how work is chunked, so results do not depend on worker counts.
"""

import numpy as np

# Stable tags for independent streams.  Values are arbitrary but fixed.
SURFACE = 1
OFF_SURFACE = 2
FEATURES = 3
DECODER = 4
OFFSETS = 5
DIAMETER = 6
METRICS = 7
PRETRAIN = 8
TRIM = 9


def stream(seed: int, tag: int, *steps: int) -> np.random.Generator:
    """Return a generator for the (seed, tag, *steps) stream."""
    words = [int(seed) & 0xFFFFFFFF, int(tag)] + [int(s) & 0xFFFFFFFF for s in steps]
    ss = np.random.SeedSequence(words)
    return np.random.Generator(np.random.Philox(ss))

"""Counter-based splittable random streams.

Every stochastic component (synthetic data, class splits, batch sampling,
episode draws) pulls from its own Philox stream keyed by (seed, tag), so
streams never interact and any single one can be replayed in isolation.
"""

import zlib

import numpy as np


def stream(seed: int, tag: str) -> np.random.Generator:
    """Return an independent generator keyed by the run seed and a purpose tag.

    Philox is counter-based: two streams with different keys are statistically
    independent regardless of how many values either one draws.
    """
    key = np.array(
        [np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(zlib.crc32(tag.encode("utf-8")))],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))

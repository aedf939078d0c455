import zlib

import numpy as np

DATA = "data"
INIT = "init"
SHUFFLE = "shuffle"
CAPTIONS = "captions"
PROPOSALS = "proposals"
FLIP = "flip"
SAMPLING = "sampling"


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Return an independent generator for the named stream of ``seed``.

    Streams are keyed by a CRC of the name (plus optional integer keys such as
    a scene index), so adding a stream never shifts the draws of another.
    """
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8")), *keys])

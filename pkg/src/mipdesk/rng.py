"""Counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by
``(seed, *keys)``, so a draw depends only on *what* it is for (stream name,
iteration, image index, ...) and never on call order or scheduling.
"""

import zlib

import numpy as np

# Stream identifiers. Values are arbitrary but frozen: changing one changes
# every result drawn from that stream.
TRAIN = 1
INIT = 2
RENDER = 3
ORACLE = 4
DATA = 5


def _key(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    return int(part)


def stream(seed, *keys):
    """Independent generator for the stream addressed by ``keys``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))

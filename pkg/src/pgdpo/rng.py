"""Named random substreams on top of a counter-based bit generator.

Every stochastic consumer in the package (parameter generation, initial-state
sampling, per-batch path increments, ...) pulls from its own substream, keyed by
the master seed plus a name and optional integer indices.  Streams derived this
way are independent of each other and of how work is later chunked across
threads, which is what makes runs reproducible bit-for-bit regardless of
--threads.
"""

import hashlib

import numpy as np


def substream(seed, name, *indices):
    """Return a numpy Generator for the (seed, name, *indices) substream.

    The Philox key is the first 128 bits of SHA-256 over the identifying
    tuple, so distinct names or indices can't collide by accident and the
    mapping is stable across platforms and numpy versions.
    """
    tag = ":".join([str(int(seed)), str(name)] + [str(int(i)) for i in indices])
    digest = hashlib.sha256(tag.encode("ascii")).digest()
    key = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))

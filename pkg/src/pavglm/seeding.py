"""Named random sub-streams derived from one integer seed."""

import zlib

import numpy as np


def stream(seed, *names):
    """Generator for the sub-stream ``names`` of ``seed``.

    The same ``(seed, names)`` always gives the same stream, independent of
    how many other streams were drawn before. ``seed=None`` gives fresh
    entropy.
    """
    if seed is None:
        return np.random.default_rng()
    key = [int(seed)] + [zlib.crc32(str(n).encode()) for n in names]
    return np.random.default_rng(key)

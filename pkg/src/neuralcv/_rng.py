"""Counter-based random streams.

Every stream is a Philox generator keyed by ``(master seed, purpose)``; the
block index is written into the top word of the 256-bit counter so that
blocks never overlap and any block can be regenerated on its own.
"""
import zlib

import numpy as np

#: Paths per RNG block.  Estimator batches are aligned to this size.
BLOCK_SIZE = 10_000

_MASK64 = (1 << 64) - 1


def purpose_key(purpose):
    if isinstance(purpose, int):
        return purpose & _MASK64
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed, purpose, block=0):
    """Return the generator for ``block`` of the ``(seed, purpose)`` stream."""
    key = (int(seed) & _MASK64) | (purpose_key(purpose) << 64)
    counter = np.array([0, 0, 0, int(block) & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def blocks(M, block_size=BLOCK_SIZE):
    """Yield ``(block_index, n_paths)`` covering ``M`` paths."""
    b = 0
    done = 0
    while done < M:
        n = min(block_size, M - done)
        yield b, n
        done += n
        b += 1

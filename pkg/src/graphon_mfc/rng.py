"""Counter-based random streams.

Every random number in the package is addressed by a tuple
``(seed, domain, label, step)`` and realized with a Philox generator whose
key is derived from that tuple.  Nothing depends on call order, so results
are identical whatever the number of threads or the order in which labels
are processed.
"""

from __future__ import annotations

import numpy as np

# domain tags, kept in the top byte of the second key word
BROWNIAN = 1
UNIFORM_MARK = 2
OPEN_LOOP = 3
AUXILIARY = 4

_MASK64 = (1 << 64) - 1


def _key(seed: int, domain: int, label: int, step: int) -> np.ndarray:
    if not 0 <= label < (1 << 24):
        raise ValueError(f"label index {label} out of range")
    if not 0 <= step < (1 << 32):
        raise ValueError(f"step index {step} out of range")
    word = (domain << 56) | (label << 32) | step
    return np.array([seed & _MASK64, word & _MASK64], dtype=np.uint64)


def generator(seed: int, domain: int, label: int = 0, step: int = 0) -> np.random.Generator:
    """Return a fresh generator for one address of the counter space."""
    return np.random.Generator(np.random.Philox(key=_key(int(seed), domain, label, step)))


def normal_block(seed: int, label: int, step: int, stream_ids: np.ndarray, dim: int) -> np.ndarray:
    """Standard normals for the Brownian increment of ``step``.

    Row ``i`` of the result belongs to stream ``stream_ids[i]``: the block is
    generated for streams ``0..max(stream_ids)`` and then gathered, so a
    particle keeps its noise when particles are reordered.
    """
    stream_ids = np.asarray(stream_ids)
    n = int(stream_ids.max()) + 1 if stream_ids.size else 0
    block = generator(seed, BROWNIAN, label, step).standard_normal((n, dim))
    return block[stream_ids]


def open_uniforms(seed: int, domain: int, label: int, stream_ids: np.ndarray, step: int = 0) -> np.ndarray:
    """Uniform draws in the open interval (0, 1), one per stream id."""
    stream_ids = np.asarray(stream_ids)
    n = int(stream_ids.max()) + 1 if stream_ids.size else 0
    ints = generator(seed, domain, label, step).integers(0, 1 << 53, size=n, dtype=np.int64)
    return ((ints.astype(np.float64) + 0.5) / float(1 << 53))[stream_ids]

"""Counter-based random streams.

Every stream is keyed by (seed, stream name); sample i of a stream is a pure
function of (seed, name, i), independent of how draws are batched and of any
other stream. That makes data loading, noise sampling, and parameter init
reproducible regardless of evaluation order, and makes checkpoint resume
exact: restoring a stream is just restoring its integer counter.

Backed by numpy's Philox4x64 bit generator (key = (seed, stream id), counter
= word index) with normals produced by inverse-CDF so each output consumes
exactly one 64-bit word.
"""

from __future__ import annotations

import hashlib

import numpy as np
from numpy.random import Philox
from scipy.special import ndtri

__all__ = ["RngStream", "stream_id"]

_WORDS_PER_BLOCK = 4  # Philox4x64 emits 4 uint64 words per counter block


def stream_id(name: str) -> int:
    """Stable 64-bit id for a stream name."""
    digest = hashlib.blake2s(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RngStream:
    """One named, counter-addressed random stream.

    State is (seed, stream id, counter); `state`/`set_state` round-trip it
    for checkpointing. All draw methods advance the counter by exactly the
    number of 64-bit words consumed.
    """

    def __init__(self, seed: int, name: str, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.name = name
        self.sid = stream_id(name)
        self.counter = int(counter)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, name={self.name!r}, counter={self.counter})"

    def state(self) -> int:
        """Consumed-word counter; with (seed, name) it pins the stream exactly."""
        return self.counter

    def set_state(self, counter: int) -> None:
        self.counter = int(counter)

    def _raw_words(self, n: int) -> np.ndarray:
        """n uint64 words starting at the current counter; advances it."""
        if n == 0:
            return np.empty(0, dtype=np.uint64)
        start = self.counter
        block, offset = divmod(start, _WORDS_PER_BLOCK)
        bg = Philox(key=np.array([self.seed, self.sid], dtype=np.uint64),
                    counter=np.array([block, 0, 0, 0], dtype=np.uint64))
        words = bg.random_raw(offset + n)[offset:]
        self.counter = start + n
        return words

    def uniform(self, shape=()) -> np.ndarray:
        """Open-interval (0, 1) uniforms, float64."""
        n = int(np.prod(shape)) if shape else 1
        w = self._raw_words(n)
        u = ((w >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0 ** -53)
        return u.reshape(shape) if shape else u[0]

    def normal(self, shape=(), dtype=np.float32) -> np.ndarray:
        """Standard normals via inverse CDF (one word per sample)."""
        u = self.uniform(shape if shape else (1,))
        z = ndtri(u)
        z = z.astype(dtype)
        return z.reshape(shape) if shape else z[0]

    def integers(self, upper: int, shape=()) -> np.ndarray:
        """Uniform integers in [0, upper). Modulo bias is ~upper/2^64."""
        if upper <= 0:
            raise ValueError("upper must be positive")
        n = int(np.prod(shape)) if shape else 1
        w = self._raw_words(n)
        v = (w % np.uint64(upper)).astype(np.int64)
        return v.reshape(shape) if shape else int(v[0])

    def choice_bool(self, p_true: float) -> bool:
        return bool(self.uniform() < p_true)

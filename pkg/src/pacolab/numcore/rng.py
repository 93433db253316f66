"""Counter-based splittable random streams on top of numpy's Philox generator.

A stream is the triple (seed, stream_id, counter).  The Philox key is
(seed, stream_id) and every draw call owns its own counter block, so a
stream's output depends only on the triple and streams never share state.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _mix64(z: int) -> int:
    # splitmix64 finalizer
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass
class RngStream:
    seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self):
        for field_name in ("seed", "stream_id", "counter"):
            value = int(getattr(self, field_name))
            if not 0 <= value <= _MASK64:
                raise ValueError(f"{field_name} must be a 64-bit unsigned integer, got {value}")
            setattr(self, field_name, value)

    def split(self, sub_id: int) -> "RngStream":
        """Child stream keyed by (seed, mix(stream_id, sub_id)); parent is not advanced."""
        child = _mix64((self.stream_id * 0x9E3779B97F4A7C15 + _mix64(int(sub_id))) & _MASK64)
        return RngStream(self.seed, child, 0)

    def _generator(self) -> np.random.Generator:
        bitgen = np.random.Philox(key=np.array([self.seed, self.stream_id], dtype=np.uint64),
                                  counter=np.array([0, 0, self.counter, 0], dtype=np.uint64))
        self.counter = (self.counter + 1) & _MASK64
        return np.random.Generator(bitgen)


def gaussian(stream: RngStream, shape) -> np.ndarray:
    """I.i.d. standard normal draws; advances the stream counter."""
    return stream._generator().standard_normal(shape)


def uniform(stream: RngStream, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    return stream._generator().uniform(low, high, shape)


def permutation(stream: RngStream, n: int) -> np.ndarray:
    return stream._generator().permutation(n)


def choice(stream: RngStream, n: int, size: int) -> np.ndarray:
    """``size`` distinct indices from range(n), in draw order."""
    return stream._generator().choice(n, size=size, replace=False)

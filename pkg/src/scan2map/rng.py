"""Reproducible random streams.

Algorithm, fixed so that sequences can be regenerated anywhere:

* Uniform bits come from Philox4x64-10 (a counter-based generator) as
  provided by ``numpy.random.Philox``, counter starting at zero.
* The 128-bit Philox key is the BLAKE2b-128 digest of the UTF-8 string
  ``"scan2map:" + ":".join(str(part) for part in (seed, *stream))``, read as
  two little-endian uint64 words. Distinct ``stream`` tuples such as
  ``(pose_id, trial)`` therefore give independent, order-free streams.
* A uniform double in (0, 1] is ``((raw >> 11) + 1) * 2**-53``.
* Gaussian variates use Box-Muller on consecutive uniform pairs (u1, u2):
  ``sqrt(-2 ln u1) * cos(2 pi u2)`` then ``sqrt(-2 ln u1) * sin(2 pi u2)``.
  An odd request discards the final sine variate.
"""

from __future__ import annotations

import hashlib

import numpy as np

_TWO_POW_M53 = 1.0 / (1 << 53)


def stream_key(seed: int, *stream: object) -> np.ndarray:
    parts = ":".join(str(p) for p in (int(seed), *stream))
    digest = hashlib.blake2b(("scan2map:" + parts).encode("utf-8"), digest_size=16).digest()
    return np.frombuffer(digest, dtype="<u8").astype(np.uint64)


class Rng:
    """Explicit random state. Advances as it is drawn from; copy() forks it."""

    def __init__(self, seed: int = 0, *stream: object) -> None:
        if int(seed) < 0 or int(seed) >= 1 << 64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.stream = tuple(stream)
        self._bits = np.random.Philox(key=stream_key(self.seed, *self.stream))

    def derive(self, *stream: object) -> "Rng":
        """Independent child stream keyed by this stream's path plus ``stream``."""
        return Rng(self.seed, *self.stream, *stream)

    def copy(self) -> "Rng":
        out = Rng.__new__(Rng)
        out.seed = self.seed
        out.stream = self.stream
        out._bits = np.random.Philox(key=stream_key(self.seed, *self.stream))
        out._bits.state = self._bits.state
        return out

    def raw(self, n: int) -> np.ndarray:
        return np.asarray(self._bits.random_raw(int(n)), dtype=np.uint64)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in (0, 1]."""
        raw = self.raw(n)
        return ((raw >> np.uint64(11)).astype(np.float64) + 1.0) * _TWO_POW_M53

    def normal(self, n: int) -> np.ndarray:
        """``n`` standard normal variates (Box-Muller)."""
        n = int(n)
        if n <= 0:
            return np.zeros(0)
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        radius = np.sqrt(-2.0 * np.log(u[0::2]))
        angle = 2.0 * np.pi * u[1::2]
        out = np.empty(2 * m)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:n]

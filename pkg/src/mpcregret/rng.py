"""Portable, seedable random streams.

Streams are Philox-4x64-10 counter-based generators. The 128-bit key is
``seed`` in the low 64 bits and the first 8 bytes (little endian) of
``blake2b("/".join(path))`` in the high 64 bits, so every named quantity of an
instance (``("instance", "q")``, ``("predictions", "t=17")``, ...) owns an
independent stream that does not shift when other quantities change size.

Uniform doubles are ``(raw >> 11) * 2**-53`` on the raw 64-bit outputs, and
standard normals use the cosine branch of Box-Muller on two consecutive
uniforms: ``sqrt(-2 log(1 - u1)) * cos(2 pi u2)``. Both transforms are spelled
out here rather than delegated to numpy's samplers so another implementation can
reproduce the same traces from the same seed.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_key(seed, *path):
    if seed < 0:
        raise ValueError("seed must be non-negative")
    label = "/".join(str(p) for p in path).encode("utf-8")
    high = int.from_bytes(hashlib.blake2b(label, digest_size=8).digest(), "little")
    return (high << 64) | (int(seed) & _MASK64)


class Stream:
    """One named random stream."""

    def __init__(self, seed, *path):
        self.key = stream_key(seed, *path)
        self._bits = np.random.Philox(key=self.key)

    def uniform(self, size):
        raw = self._bits.random_raw(int(np.prod(size, dtype=np.int64)))
        u = (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(size)

    def normal(self, size):
        count = int(np.prod(size, dtype=np.int64))
        u = self.uniform(2 * count)
        u1, u2 = u[0::2], u[1::2]
        z = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
        return z.reshape(size)

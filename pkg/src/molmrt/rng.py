"""Counter-based random streams and the project's stable 64-bit hash.

All randomness in this package flows through named Philox streams rather
than one shared sequential generator. A stream is keyed by a seed plus an
arbitrary tuple of tags (strings/ints), so any consumer can re-derive its
own draws in isolation: results do not depend on evaluation order or on
which other components consumed randomness first.

The stable hash is a word-wise FNV/splitmix combination, fixed by the
constants below. It is used wherever hashes must be bit-identical across
runs and platforms (fingerprint identifiers, stream keys, checkpoint
config digests); the host language's builtin ``hash`` is never used for
those purposes.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1

# FNV-1a 64-bit basis/prime; splitmix64 finalizer multipliers.
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def mix64(x: int) -> int:
    """splitmix64 finalizer: avalanche a 64-bit word."""
    x &= _MASK64
    x ^= x >> 30
    x = (x * _MIX1) & _MASK64
    x ^= x >> 27
    x = (x * _MIX2) & _MASK64
    x ^= x >> 31
    return x


def hash_bytes(data: bytes, h: int = FNV_OFFSET) -> int:
    """FNV-1a over raw bytes."""
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


def stable_hash(*fields: int | str | bytes) -> int:
    """Combine heterogeneous fields into one 64-bit identifier.

    Integers are folded word-wise (two's complement), strings/bytes via
    FNV-1a of their UTF-8 bytes; every field is separated by a splitmix
    avalanche so field boundaries cannot alias.
    """
    h = FNV_OFFSET
    for f in fields:
        if isinstance(f, str):
            f = hash_bytes(f.encode("utf-8"))
        elif isinstance(f, bytes):
            f = hash_bytes(f)
        h = mix64((h ^ (f & _MASK64)) * FNV_PRIME)
    return h


class Stream:
    """A deterministic draw source backed by one Philox counter stream.

    Uniform doubles come from the top 53 bits of raw 64-bit words;
    gaussians from Box-Muller over those uniforms; bounded integers from
    raw words modulo the bound. These constructions are fixed here (not
    delegated to numpy's distribution code) so the byte-level stream is
    stable across numpy versions.
    """

    def __init__(self, seed: int, *tags: int | str):
        key = np.array([seed & _MASK64, stable_hash(*tags)], dtype=np.uint64)
        self._bg = np.random.Philox(key=key)

    def raw(self, n: int) -> np.ndarray:
        return self._bg.random_raw(n)

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1)."""
        return (self.raw(n) >> np.uint64(11)) * (2.0 ** -53)

    def gaussian(self, n: int) -> np.ndarray:
        """n standard-normal doubles (Box-Muller, pairwise)."""
        m = (n + 1) // 2
        u1 = (self.raw(m) >> np.uint64(11)).astype(np.float64)
        u1 = (u1 + 1.0) * (2.0 ** -53)  # (0, 1]: keeps log finite
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        out = np.empty(2 * m, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def integers(self, n: int, bound: int) -> np.ndarray:
        """n integers in [0, bound). Modulo construction; the tiny bias is
        irrelevant here and the stream layout never changes."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return (self.raw(n) % np.uint64(bound)).astype(np.int64)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates using this stream's raw words."""
        n = len(items)
        if n < 2:
            return
        draws = self.raw(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(draws[n - 1 - i] % np.uint64(i + 1))
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> list[int]:
        out = list(range(n))
        self.shuffle(out)
        return out

"""Bloom filters with double hashing, and Monkey per-level bit allocation."""
from __future__ import annotations

import math
import struct

import numpy as np

LN2 = math.log(2.0)
LN2_SQ = LN2 * LN2
M64 = (1 << 64) - 1

_C0 = 0x9E3779B97F4A7C15
_C1 = 0xBF58476D1CE4E5B9
_C2 = 0x94D049BB133111EB


def mix64(key: int, seed: int) -> int:
    z = (key + (seed + 1) * _C0) & M64
    z = ((z ^ (z >> 30)) * _C1) & M64
    z = ((z ^ (z >> 27)) * _C2) & M64
    return z ^ (z >> 31)


def mix64_array(keys: np.ndarray, seed: int) -> np.ndarray:
    z = keys.astype(np.uint64) + np.uint64(((seed + 1) * _C0) & M64)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_C1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_C2)
    return z ^ (z >> np.uint64(31))


def design_fpr(bits_per_key: float, k: int | None = None) -> float:
    """Expected false-positive rate of a filter with ``bits_per_key`` and ``k`` hashes."""
    if bits_per_key <= 0:
        return 1.0
    k = k or hash_count(bits_per_key)
    return (1.0 - math.exp(-k / bits_per_key)) ** k


def hash_count(bits_per_key: float) -> int:
    return max(1, math.ceil(bits_per_key * LN2))


class BloomFilter:
    """Bit array with ``k = ceil(b ln 2)`` probes derived by double hashing.

    A filter built with 0 bits per key is disabled and answers "maybe" for everything.
    """

    HEADER = struct.Struct("<4sQQIdQ")
    MAGIC = b"BLMF"

    def __init__(self, m: int, k: int, seed: int, n: int, bits_per_key: float, bits: bytearray):
        self.m = m
        self.k = k
        self.seed = seed
        self.n = n
        self.bits_per_key = bits_per_key
        self.bits = bits

    @classmethod
    def build(cls, keys: np.ndarray, bits_per_key: float, seed: int = 0) -> "BloomFilter":
        n = len(keys)
        if bits_per_key <= 0 or n == 0:
            return cls(0, 0, seed, n, 0.0, bytearray())
        m = max(8, math.ceil(bits_per_key * n))
        k = hash_count(bits_per_key)
        z = mix64_array(np.asarray(keys, dtype=np.uint64), seed)
        h1 = z & np.uint64(0xFFFFFFFF)
        h2 = (z >> np.uint64(32)) | np.uint64(1)
        bitmap = np.zeros(m, dtype=bool)
        mm = np.uint64(m)
        for i in range(k):
            bitmap[((h1 + np.uint64(i) * h2) % mm).astype(np.int64)] = True
        bits = bytearray(np.packbits(bitmap, bitorder="little").tobytes())
        return cls(m, k, seed, n, bits_per_key, bits)

    @property
    def enabled(self) -> bool:
        return self.m > 0

    @property
    def size_bits(self) -> int:
        return self.m

    def might_contain(self, key: int) -> bool:
        if not self.m:
            return True
        z = mix64(key, self.seed)
        h1 = z & 0xFFFFFFFF
        h2 = (z >> 32) | 1
        m, bits = self.m, self.bits
        for i in range(self.k):
            pos = (h1 + i * h2) % m
            if not bits[pos >> 3] & (1 << (pos & 7)):
                return False
        return True

    def design_fpr(self) -> float:
        if not self.m:
            return 1.0
        return (1.0 - math.exp(-self.k * self.n / self.m)) ** self.k

    def to_bytes(self) -> bytes:
        return self.HEADER.pack(self.MAGIC, self.seed, self.m, self.k, self.bits_per_key, self.n) + bytes(self.bits)

    @classmethod
    def from_bytes(cls, data: bytes) -> "BloomFilter":
        magic, seed, m, k, bpk, n = cls.HEADER.unpack_from(data)
        if magic != cls.MAGIC:
            raise ValueError("not a filter file")
        return cls(m, k, seed, n, bpk, bytearray(data[cls.HEADER.size:]))


def monkey_allocate(env, M_f: float, level_sizes) -> list[float]:
    """Per-level bits-per-key spending ``M_f`` bytes so that false-positive rates
    are proportional to level sizes (capped at 1).

    Total filter bits ``sum(-n_i ln p_i) / ln(2)^2`` equals ``8 * M_f``.
    """
    sizes = np.asarray(level_sizes, dtype=float)
    if len(sizes) == 0:
        return []
    budget = 8.0 * float(M_f) * LN2_SQ
    out = np.zeros(len(sizes))
    if budget <= 0 or sizes.sum() <= 0:
        return out.tolist()
    # p_i = c * n_i on the unclamped set S: ln c = -(budget + sum n ln n) / sum n;
    # drop levels whose rate would exceed 1 and re-solve
    active = sizes > 0
    while True:
        n = sizes[active]
        log_c = -(budget + float(np.sum(n * np.log(n)))) / float(n.sum())
        over = active & (log_c + np.log(np.where(sizes > 0, sizes, 1.0)) > 0)
        if not over.any():
            break
        active &= ~over
    out[active] = -(log_c + np.log(sizes[active])) / LN2_SQ
    return out.tolist()


def allocation_fprs(bits_per_key) -> np.ndarray:
    """False-positive rates implied by an allocation under the ``exp(-b ln^2 2)`` law."""
    return np.exp(-np.asarray(bits_per_key, dtype=float) * LN2_SQ)

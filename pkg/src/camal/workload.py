"""Workload mixes, key distributions and deterministic operation streams."""
from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

MIX_TOLERANCE = 1e-9
DEFAULT_SELECTIVITY = 8

# existing keys live below 2**62; absent-lookup keys always carry the top bit
KEY_MASK = (1 << 62) - 1
ABSENT_BIT = 1 << 63
_KEY_MULT = np.uint64(0x9E3779B97F4A7C15)


class OpKind(enum.IntEnum):
    GET_ABSENT = 0
    GET_EXISTING = 1
    RANGE = 2
    PUT = 3
    DELETE = 4


@dataclass(frozen=True)
class WorkloadMix:
    """Operation fractions: zero-result lookups ``v``, non-zero-result lookups ``r``,
    range lookups ``q`` and writes ``w``; ``s`` is the range selectivity in entries."""

    v: float
    r: float
    q: float
    w: float
    s: int = DEFAULT_SELECTIVITY
    delete_fraction: float = 0.0

    def __post_init__(self):
        for name in ("v", "r", "q", "w", "delete_fraction"):
            x = getattr(self, name)
            if not (0.0 <= x <= 1.0) or math.isnan(x):
                raise ValueError(f"{name}={x} outside [0, 1]")
        total = self.v + self.r + self.q + self.w
        if abs(total - 1.0) > MIX_TOLERANCE:
            raise ValueError(f"operation fractions sum to {total!r}, expected 1")
        if self.s < 0:
            raise ValueError("selectivity must be non-negative")

    @property
    def fractions(self) -> np.ndarray:
        return np.array([self.v, self.r, self.q, self.w])

    @classmethod
    def from_fractions(cls, fr: Sequence[float], s: int = DEFAULT_SELECTIVITY,
                       delete_fraction: float = 0.0) -> "WorkloadMix":
        v, r, q, w = (float(x) for x in fr)
        return cls(v, r, q, w, s=s, delete_fraction=delete_fraction)

    def with_fractions(self, fr: Sequence[float]) -> "WorkloadMix":
        return WorkloadMix.from_fractions(fr, s=self.s, delete_fraction=self.delete_fraction)


def _percent_columns(rows: Sequence[Sequence[int]]) -> list[WorkloadMix]:
    v, r, q, w = rows
    return [WorkloadMix(a / 100, b / 100, c / 100, d / 100) for a, b, c, d in zip(v, r, q, w)]


_TRAIN_ROWS = (
    (25, 97, 1, 1, 1, 49, 49, 49, 1, 1, 1, 33, 33, 33, 1),
    (25, 1, 97, 1, 1, 49, 1, 1, 49, 49, 1, 33, 33, 1, 33),
    (25, 1, 1, 97, 1, 1, 49, 1, 49, 1, 49, 33, 1, 33, 33),
    (25, 1, 1, 1, 97, 1, 1, 49, 1, 49, 49, 1, 33, 33, 33),
)

_TEST_ROWS = (
    (60, 75, 91, 75, 60, 45, 30, 15, 3, 5, 5, 5, 5, 5, 3, 5, 5, 5, 5, 5, 3, 15, 30, 45),
    (5, 5, 3, 15, 30, 45, 60, 75, 91, 75, 60, 45, 30, 15, 3, 5, 5, 5, 5, 5, 3, 5, 5, 5),
    (5, 5, 3, 5, 5, 5, 5, 5, 3, 15, 30, 45, 60, 75, 91, 75, 60, 45, 30, 15, 3, 5, 5, 5),
    (30, 15, 3, 5, 5, 5, 5, 5, 3, 5, 5, 5, 5, 5, 3, 15, 30, 45, 60, 75, 91, 75, 60, 45),
)


def training_workloads() -> list[WorkloadMix]:
    """The 15 training mixes (unimodal, bimodal, trimodal)."""
    return _percent_columns(_TRAIN_ROWS)


def test_workloads() -> list[WorkloadMix]:
    """The 24 shifting mixes, in replay order."""
    return _percent_columns(_TEST_ROWS)


# keep pytest from collecting the table accessor above
test_workloads.__test__ = False  # type: ignore[attr-defined]


@dataclass(frozen=True)
class KeyDistribution:
    kind: str = "uniform"
    theta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("uniform", "zipfian"):
            raise ValueError(f"unknown key distribution {self.kind!r}")
        if not 0.0 <= self.theta <= 0.99:
            raise ValueError("zipfian theta must lie in [0, 0.99]")


class ZipfianGenerator:
    """Bounded Zipfian over ranks ``0..n-1`` using the YCSB closed-form inverse CDF."""

    def __init__(self, n: int, theta: float):
        if n < 1:
            raise ValueError("n must be positive")
        self.n = n
        self.theta = theta
        i = np.arange(1, n + 1, dtype=np.float64)
        self.zetan = float(np.sum(i ** -theta))
        self.zeta2 = 1.0 + 0.5 ** theta
        self.alpha = 1.0 / (1.0 - theta)
        if n > 2:
            self.eta = (1 - (2.0 / n) ** (1 - theta)) / (1 - self.zeta2 / self.zetan)
        else:
            self.eta = 1.0

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        u = rng.random(size)
        uz = u * self.zetan
        with np.errstate(invalid="ignore"):
            ranks = np.floor(self.n * np.power(self.eta * u - self.eta + 1.0, self.alpha))
        ranks = np.nan_to_num(ranks, nan=0.0)
        ranks = np.clip(ranks, 0, self.n - 1).astype(np.int64)
        ranks[uz < 1.0 + 0.5 ** self.theta] = min(1, self.n - 1)
        ranks[uz < 1.0] = 0
        return ranks

    def probabilities(self) -> np.ndarray:
        """Exact Zipf law over ranks (the target the sampler approximates)."""
        i = np.arange(1, self.n + 1, dtype=np.float64)
        return i ** -self.theta / self.zetan


@dataclass(frozen=True)
class KeyUniverse:
    """The pool of ingested keys: index ``i`` maps bijectively onto a scrambled 62-bit key."""

    n: int
    seed: int = 0

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("key universe must be nonempty")

    def keys(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        stop = self.n if stop is None else stop
        return key_universe_keys_at(self, np.arange(start, stop, dtype=np.uint64))

    def grown(self, extra: int) -> "KeyUniverse":
        return KeyUniverse(self.n + extra, self.seed)


@dataclass
class OperationStream:
    kinds: np.ndarray  # uint8 OpKind codes
    keys: np.ndarray  # uint64
    selectivity: int = DEFAULT_SELECTIVITY
    value_base: int = 0

    def __len__(self) -> int:
        return len(self.kinds)

    def __iter__(self) -> Iterator[tuple[int, int]]:
        return zip(self.kinds.tolist(), self.keys.tolist())

    def value(self, i: int) -> bytes:
        return (self.value_base + i).to_bytes(8, "little")

    def counts(self) -> np.ndarray:
        return np.bincount(self.kinds, minlength=len(OpKind))

    def to_bytes(self) -> bytes:
        return (self.kinds.astype(np.uint8).tobytes() + self.keys.astype("<u8").tobytes()
                + self.selectivity.to_bytes(8, "little") + self.value_base.to_bytes(8, "little"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def slice(self, start: int, stop: int) -> "OperationStream":
        return OperationStream(self.kinds[start:stop], self.keys[start:stop],
                               self.selectivity, self.value_base + start)


def _draw_ranks(dist: KeyDistribution, rng: np.random.Generator, n: int, size: int,
                zipf: ZipfianGenerator | None) -> np.ndarray:
    if size == 0:
        return np.zeros(0, dtype=np.int64)
    if dist.kind == "uniform":
        return rng.integers(0, n, size=size)
    return zipf.sample(rng, size)


def generate_stream(mix: WorkloadMix, dist: KeyDistribution, count: int,
                    key_universe: KeyUniverse, value_base: int = 0) -> OperationStream:
    """Draw ``count`` i.i.d. operations from ``mix`` with keys drawn per ``dist``."""
    if count <= 0:
        raise ValueError("count must be positive")
    if not isinstance(mix, WorkloadMix):
        raise TypeError("mix must be a WorkloadMix")
    rng = np.random.default_rng([dist.seed, 0x5EED])
    n = key_universe.n
    fr = mix.fractions
    cum = np.cumsum(fr)
    # no round-off sliver may select a kind with zero weight
    cum[int(np.flatnonzero(fr > 0)[-1]):] = 1.0
    kinds = np.searchsorted(cum, rng.random(count), side="right").astype(np.uint8)
    if mix.delete_fraction > 0:
        writes = np.flatnonzero(kinds == OpKind.PUT)
        dels = writes[rng.random(len(writes)) < mix.delete_fraction]
        kinds[dels] = OpKind.DELETE

    zipf = ZipfianGenerator(n, dist.theta) if dist.kind == "zipfian" else None
    # rank -> key index; hot ranks land on scattered keys
    perm = rng.permutation(n) if zipf is not None else None
    keys = np.zeros(count, dtype=np.uint64)

    absent = kinds == OpKind.GET_ABSENT
    present = ~absent
    ranks = _draw_ranks(dist, rng, n, int(present.sum()), zipf)
    idx = perm[ranks] if perm is not None else ranks
    # a bijective key(i) lets us map indices without materialising the pool
    keys[present] = key_universe_keys_at(key_universe, idx)
    keys[absent] = (rng.integers(0, KEY_MASK, size=int(absent.sum()), dtype=np.uint64)
                    | np.uint64(ABSENT_BIT))
    return OperationStream(kinds, keys, selectivity=mix.s, value_base=value_base)


def key_universe_keys_at(universe: KeyUniverse, idx: np.ndarray) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.uint64)
    offset = np.uint64((universe.seed * 0xD1B54A32D192ED03) & KEY_MASK)
    return ((idx * _KEY_MULT) + offset) & np.uint64(KEY_MASK)


def insert_stream(universe: KeyUniverse, count: int, value_base: int = 0) -> OperationStream:
    """Fresh-key inserts for indices ``n .. n+count-1`` of the universe."""
    keys = universe.grown(count).keys(universe.n, universe.n + count)
    kinds = np.full(count, OpKind.PUT, dtype=np.uint8)
    return OperationStream(kinds, keys, value_base=value_base)


def observed_mix(kinds: np.ndarray, s: int = DEFAULT_SELECTIVITY) -> WorkloadMix:
    """Empirical (v, r, q, w) of a window of operation codes; deletes count as writes."""
    c = np.bincount(np.asarray(kinds, dtype=np.int64), minlength=len(OpKind)).astype(float)
    total = c.sum()
    if total == 0:
        raise ValueError("empty window")
    fr = np.array([c[0], c[1], c[2], c[3] + c[4]]) / total
    # put the rounding residual on the most frequent kind
    top = int(np.argmax(fr))
    fr[top] = 1.0 - (fr.sum() - fr[top])
    return WorkloadMix.from_fractions(np.clip(fr, 0.0, 1.0), s=s,
                                      delete_fraction=float(c[4] / max(c[3] + c[4], 1)))


def format_workload_line(mix: WorkloadMix) -> str:
    return ",".join(repr(float(x)) for x in (mix.v, mix.r, mix.q, mix.w)) + f",{mix.s},{mix.delete_fraction!r}"


def write_workload_file(path: str | Path, mixes: Sequence[WorkloadMix]) -> None:
    Path(path).write_text("".join(format_workload_line(m) + "\n" for m in mixes))


def read_workload_file(path: str | Path) -> list[WorkloadMix]:
    mixes = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) not in (4, 5, 6):
            raise ValueError(f"{path}:{lineno}: expected v,r,q,w[,s[,delete_fraction]]")
        v, r, q, w = (float(x) for x in parts[:4])
        s = int(parts[4]) if len(parts) > 4 else DEFAULT_SELECTIVITY
        d = float(parts[5]) if len(parts) > 5 else 0.0
        mixes.append(WorkloadMix(v, r, q, w, s=s, delete_fraction=d))
    return mixes

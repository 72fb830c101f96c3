"""Desk-scale LSM-tree with exact block-I/O accounting and lazy reconfiguration."""
from __future__ import annotations

import heapq
import time
from bisect import bisect_left, bisect_right, insort
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ..analytic import Environment, LsmConfig, Policy
from ..samples import CostSample
from ..workload import OpKind, OperationStream, WorkloadMix
from .bloom import BloomFilter, mix64, monkey_allocate
from .cache import BlockCache
from .storage import FileStore, MemoryStore, StorageError

_MISSING = object()
KEY_LIMIT = 1 << 64


class ConfigError(ValueError):
    pass


@dataclass
class DeviceModel:
    """Charges simulated device time per block on top of measured wall time.

    With ``wall_clock=False`` latencies are device time only, which makes
    them reproducible run to run.
    """

    read_ns: int = 10_000
    write_ns: int = 10_000
    wall_clock: bool = True


def _no_clock() -> int:
    return 0


@dataclass
class IoStats:
    blocks_read: int = 0
    blocks_written: int = 0
    filter_probes: int = 0
    filter_false_positives: int = 0
    cache_hits: int = 0
    compaction_blocks_read: int = 0
    compaction_blocks_written: int = 0
    wall_ns: int = 0
    op_counts: dict = field(default_factory=lambda: {k.name.lower(): 0 for k in OpKind})

    @property
    def io(self) -> int:
        return self.blocks_read + self.blocks_written

    @property
    def compaction_io(self) -> int:
        return self.compaction_blocks_read + self.compaction_blocks_written

    def copy(self) -> "IoStats":
        return replace(self, op_counts=dict(self.op_counts))

    def minus(self, other: "IoStats") -> "IoStats":
        out = IoStats()
        for f in fields(self):
            if f.name == "op_counts":
                out.op_counts = {k: self.op_counts[k] - other.op_counts.get(k, 0) for k in self.op_counts}
            else:
                setattr(out, f.name, getattr(self, f.name) - getattr(other, f.name))
        return out

    def reset(self) -> None:
        fresh = IoStats()
        for f in fields(self):
            setattr(self, f.name, getattr(fresh, f.name))


@dataclass(eq=False)
class Run:
    run_id: int
    level: int  # 1-based
    n: int
    fences: list
    min_key: int
    max_key: int
    bloom: BloomFilter
    epoch: int
    n_blocks: int

    @property
    def bits_per_key(self) -> float:
        return self.bloom.bits_per_key


def level_capacity_entries(cfg: LsmConfig, E: int, level: int) -> float:
    """Entries level ``level`` (1-based) holds: ``(M_b/E) * (T-1) * T**(level-1)``."""
    return (cfg.M_b / E) * (cfg.T - 1) * cfg.T ** (level - 1)


def cumulative_capacity_bytes(cfg: LsmConfig, level: int) -> float:
    """Bytes held by the buffer plus levels ``1..level`` when all are full: ``M_b * T**level``."""
    return cfg.M_b * cfg.T ** level


def projected_level_sizes(n_total: int, cfg: LsmConfig, E: int) -> list[float]:
    """Level sizes of a tree holding ``n_total`` entries: full upper levels, remainder at the bottom."""
    per_buffer = cfg.M_b / E
    sizes, filled = [], 0.0
    level = 1
    while True:
        cap = level_capacity_entries(cfg, E, level)
        if filled + cap >= n_total or per_buffer <= 0:
            sizes.append(max(n_total - filled, 1.0))
            return sizes
        sizes.append(cap)
        filled += cap
        level += 1


class LsmTree:
    """Write buffer over leveled or tiered sorted runs of ``B``-entry blocks.

    All I/O is counted in :attr:`stats`. With ``storage_path=None`` runs live in
    memory; otherwise every run is a pair of files under ``storage_path``.
    """

    def __init__(self, env: Environment, cfg: LsmConfig, storage_path: str | Path | None = None,
                 *, seed: int = 0, device: DeviceModel | None = None):
        try:
            cfg.validate(env)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.env = env
        self.B = env.B
        self.E = env.E
        self.block_bytes = env.B * env.E
        self.active = cfg
        self.target = cfg
        self.seed = seed
        self.device = device or DeviceModel()
        self.path = Path(storage_path) if storage_path is not None else None
        self.store = (FileStore(self.path, env.B, env.E) if self.path is not None
                      else MemoryStore(env.B))
        self.levels: list[list[Run]] = []
        self.caps: list[float] = []
        self.level_epoch: list[int] = []
        self.epoch = 0
        self.next_id = 1
        self.buffer: dict = {}
        self._buf_keys: list[int] = []
        self._entries = 0
        self.cache = BlockCache(cfg.M_c // self.block_bytes)
        self.stats = IoStats()
        self._bpk_cache: tuple | None = None
        self.closed = False

    # -- construction -----------------------------------------------------

    @classmethod
    def open(cls, env: Environment, cfg: LsmConfig, storage_path: str | Path | None = None,
             *, seed: int = 0, device: DeviceModel | None = None) -> "LsmTree":
        """Create a tree, or recover one from ``storage_path/MANIFEST`` when present."""
        if storage_path is not None and (Path(storage_path) / "MANIFEST").exists():
            from .manifest import recover
            return recover(cls, env, Path(storage_path), device=device)
        return cls(env, cfg, storage_path, seed=seed, device=device)

    # -- sizing -----------------------------------------------------------

    @property
    def buffer_capacity(self) -> int:
        return max(1, int(self.target.M_b // self.E))

    def capacity(self, level: int) -> float:
        """Current capacity (entries) of a 1-based level; refreshed lazily toward the target."""
        if level - 1 < len(self.caps):
            return self.caps[level - 1]
        return level_capacity_entries(self.target, self.E, level)

    def target_capacity(self, level: int) -> float:
        return level_capacity_entries(self.target, self.E, level)

    def level_entries(self, level: int) -> int:
        return sum(r.n for r in self.levels[level - 1]) if level - 1 < len(self.levels) else 0

    @property
    def entry_count(self) -> int:
        """Physical entries held (versions and tombstones included)."""
        return self._entries + len(self.buffer)

    @property
    def depth(self) -> int:
        return len(self.levels)

    def runs(self) -> list[Run]:
        return [r for level in self.levels for r in level]

    def _bits_per_key(self, level: int) -> float:
        n_total = max(self.env.N, self.entry_count)
        key = (self.epoch, self.target, n_total)
        if self._bpk_cache is None or self._bpk_cache[0] != key:
            sizes = projected_level_sizes(n_total, self.target, self.E)
            self._bpk_cache = (key, monkey_allocate(self.env, self.target.M_f, sizes))
        table = self._bpk_cache[1]
        return table[min(level, len(table)) - 1]

    # -- writes -----------------------------------------------------------

    def _check_open(self):
        if self.closed:
            raise StorageError("tree is closed")

    def put(self, key: int, value: bytes) -> None:
        self._check_open()
        if not 0 <= key < KEY_LIMIT:
            raise ValueError("keys are unsigned 64-bit integers")
        if value is None:
            raise ValueError("use delete() to remove a key")
        self._buffer_write(key, value)

    def delete(self, key: int) -> None:
        self._check_open()
        if not 0 <= key < KEY_LIMIT:
            raise ValueError("keys are unsigned 64-bit integers")
        self._buffer_write(key, None)

    def _buffer_write(self, key: int, value) -> None:
        if key not in self.buffer:
            insort(self._buf_keys, key)
        self.buffer[key] = value
        if len(self.buffer) >= self.buffer_capacity:
            self.flush()

    def flush(self) -> None:
        if not self.buffer:
            return
        keys = np.array(self._buf_keys, dtype=np.uint64)
        vals = np.empty(len(keys), dtype=object)
        vals[:] = [self.buffer[k] for k in self._buf_keys]
        tomb = np.array([v is None for v in vals], dtype=bool)
        self.buffer = {}
        self._buf_keys = []
        self._ingest(keys, vals, tomb)

    def bulk_load(self, keys, values) -> None:
        """Ingest distinct keys in buffer-sized chunks, as a stream of puts would."""
        self._check_open()
        keys = np.asarray(keys, dtype=np.uint64)
        vals = np.empty(len(keys), dtype=object)
        vals[:] = list(values)
        self.flush()
        step = self.buffer_capacity
        for lo in range(0, len(keys), step):
            k = keys[lo:lo + step]
            order = np.argsort(k, kind="stable")
            self._ingest(k[order], vals[lo:lo + step][order], np.zeros(len(k), dtype=bool))

    def _ingest(self, keys, vals, tomb) -> None:
        if not self.levels:
            self._add_level()
        if self.target.policy is Policy.LEVELING:
            olds = self.levels[0]
            inputs = [(keys, vals, tomb)] + [self._read_run(r) for r in olds]
            drop = self._is_bottom(1)
            self._retire(olds)
            self.levels[0] = []
            self._emit(1, *self._merge(inputs, drop))
        else:
            self._emit(1, keys, vals, tomb)
        self._refresh(1)
        self._cascade(1)
        self._maybe_finish_transition()

    def _add_level(self) -> None:
        lvl = len(self.levels) + 1
        self.levels.append([])
        self.caps.append(self.target_capacity(lvl))
        self.level_epoch.append(self.epoch)

    def _refresh(self, level: int) -> None:
        self.caps[level - 1] = self.target_capacity(level)
        self.level_epoch[level - 1] = self.epoch

    def _is_bottom(self, level: int) -> bool:
        return all(not lv for lv in self.levels[level:])

    def _over(self, level: int) -> bool:
        runs = self.levels[level - 1]
        if not runs:
            return False
        if self.target.policy is Policy.TIERING and len(runs) >= self.target.T:
            return True
        return sum(r.n for r in runs) > self.caps[level - 1]

    def _cascade(self, level: int) -> None:
        while self._over(level):
            if level == len(self.levels):
                self._add_level()
            src = self.levels[level - 1]
            inputs = [self._read_run(r) for r in src]
            if self.target.policy is Policy.LEVELING:
                dst = self.levels[level]
                inputs += [self._read_run(r) for r in dst]
                drop = self._is_bottom(level + 1)
                self._retire(src + dst)
                self.levels[level - 1] = []
                self.levels[level] = []
                self._emit(level + 1, *self._merge(inputs, drop))
            else:
                drop = self._is_bottom(level + 1) and not self.levels[level]
                self._retire(src)
                self.levels[level - 1] = []
                self._emit(level + 1, *self._merge(inputs, drop))
            self._refresh(level + 1)
            level += 1

    @staticmethod
    def _merge(inputs, drop_tombstones: bool):
        # inputs ordered newest first; np.unique keeps the first occurrence
        if len(inputs) == 1:
            keys, vals, tomb = inputs[0]
        else:
            keys = np.concatenate([i[0] for i in inputs])
            vals = np.concatenate([i[1] for i in inputs])
            tomb = np.concatenate([i[2] for i in inputs])
            keys, idx = np.unique(keys, return_index=True)
            vals, tomb = vals[idx], tomb[idx]
        if drop_tombstones and tomb.any():
            live = ~tomb
            keys, vals, tomb = keys[live], vals[live], tomb[live]
        return keys, vals, tomb

    def _read_run(self, run: Run):
        self.stats.blocks_read += run.n_blocks
        self.stats.compaction_blocks_read += run.n_blocks
        return self.store.read_run(run.run_id, run.level, run.n_blocks)

    def _retire(self, runs) -> None:
        for r in runs:
            self._entries -= r.n
            self.cache.drop_run(r.run_id, r.n_blocks)
            self.store.delete_run(r.run_id, r.level)

    def _emit(self, level: int, keys, vals, tomb) -> Run | None:
        n = len(keys)
        if n == 0:
            return None
        run_id = self.next_id
        self.next_id += 1
        bpk = self._bits_per_key(level)
        bloom = BloomFilter.build(keys, bpk, seed=mix64(run_id, self.seed) & 0xFFFFFFFF)
        self.store.write_run(run_id, level, keys, vals, tomb)
        self.store.write_filter(run_id, level, bloom)
        n_blocks = -(-n // self.B)
        self.stats.blocks_written += n_blocks
        self.stats.compaction_blocks_written += n_blocks
        run = Run(run_id, level, n, keys[::self.B].tolist(), int(keys[0]), int(keys[-1]),
                  bloom, self.epoch, n_blocks)
        self.levels[level - 1].insert(0, run)
        self._entries += n
        return run

    # -- reads ------------------------------------------------------------

    def _fetch(self, run: Run, b: int):
        cache = self.cache
        if cache.capacity:
            ck = (run.run_id, b)
            blk = cache.get(ck)
            if blk is not None:
                self.stats.cache_hits += 1
                return blk
            blk = self.store.read_block(run.run_id, run.level, b)
            self.stats.blocks_read += 1
            cache.put(ck, blk)
            return blk
        self.stats.blocks_read += 1
        return self.store.read_block(run.run_id, run.level, b)

    def get(self, key: int):
        """Newest value for ``key`` or None when absent or deleted."""
        self._check_open()
        v = self.buffer.get(key, _MISSING)
        if v is not _MISSING:
            return v
        stats = self.stats
        for level in self.levels:
            for run in level:
                bloom = run.bloom
                if bloom.m:
                    stats.filter_probes += 1
                    if not bloom.might_contain(key):
                        continue
                b = bisect_right(run.fences, key) - 1
                keys, vals, _ = self._fetch(run, b if b > 0 else 0)
                j = bisect_left(keys, key)
                if j < len(keys) and keys[j] == key:
                    return vals[j]
                if bloom.m:
                    stats.filter_false_positives += 1
        return None

    def range(self, start: int, s: int) -> list[tuple[int, bytes]]:
        """Up to ``s`` live entries with key >= ``start``, ascending, newest version wins."""
        self._check_open()
        out: list[tuple[int, bytes]] = []
        if s <= 0:
            return out
        heap: list = []
        seq = 0
        if self._buf_keys:
            i = bisect_left(self._buf_keys, start)
            if i < len(self._buf_keys):
                heap.append((self._buf_keys[i], 0, 1, seq, None, i))
                seq += 1
        prio = 1
        for level in self.levels:
            for run in level:
                if run.max_key >= start:
                    b = max(0, bisect_right(run.fences, start) - 1)
                    # unread block: its fence bounds every key inside it
                    heap.append((max(start, run.fences[b]), prio, 0, seq, run, (b, None, 0)))
                    seq += 1
                prio += 1
        heapq.heapify(heap)
        last = None
        buf, buf_keys = self.buffer, self._buf_keys
        while heap and len(out) < s:
            key, prio, kind, _, run, state = heapq.heappop(heap)
            if run is None:
                i = state
                if key != last:
                    last = key
                    val = buf[key]
                    if val is not None:
                        out.append((key, val))
                if i + 1 < len(buf_keys):
                    heapq.heappush(heap, (buf_keys[i + 1], prio, 1, seq, None, i + 1))
                    seq += 1
                continue
            b, block, j = state
            if kind == 0:
                block = self._fetch(run, b)
                j = bisect_left(block[0], start)
                if j < len(block[0]):
                    heapq.heappush(heap, (block[0][j], prio, 1, seq, run, (b, block, j)))
                elif b + 1 < run.n_blocks:
                    heapq.heappush(heap, (run.fences[b + 1], prio, 0, seq, run, (b + 1, None, 0)))
                seq += 1
                continue
            if key != last:
                last = key
                if not block[2][j]:
                    out.append((key, block[1][j]))
            if j + 1 < len(block[0]):
                heapq.heappush(heap, (block[0][j + 1], prio, 1, seq, run, (b, block, j + 1)))
            elif b + 1 < run.n_blocks:
                heapq.heappush(heap, (run.fences[b + 1], prio, 0, seq, run, (b + 1, None, 0)))
            seq += 1
        return out

    # -- workloads --------------------------------------------------------

    def run_workload(self, stream: OperationStream, mix: WorkloadMix | None = None,
                     workload_id: int = 0, seed: int = 0) -> CostSample:
        """Execute ``stream`` and summarise the window as a :class:`CostSample`."""
        self._check_open()
        before = self.stats.copy()
        n = len(stream)
        lat = np.zeros(n, dtype=np.float64)
        stats = self.stats
        read_ns, write_ns = self.device.read_ns, self.device.write_ns
        counts = stats.op_counts
        names = [k.name.lower() for k in OpKind]
        get, rng, put, delete = self.get, self.range, self._buffer_write, self.delete
        s = stream.selectivity
        base = stream.value_base
        clock = time.perf_counter_ns if self.device.wall_clock else _no_clock
        t_start = clock()
        for i, (kind, key) in enumerate(stream):
            r0, w0 = stats.blocks_read, stats.blocks_written
            t0 = clock()
            if kind <= 1:
                get(key)
            elif kind == 2:
                rng(key, s)
            elif kind == 3:
                put(key, (base + i).to_bytes(8, "little"))
            else:
                delete(key)
            lat[i] = (clock() - t0 + read_ns * (stats.blocks_read - r0)
                      + write_ns * (stats.blocks_written - w0))
            counts[names[kind]] += 1
        stats.wall_ns += clock() - t_start
        delta = stats.minus(before)
        io = delta.blocks_read + delta.blocks_written
        return CostSample(
            workload_id=workload_id, mix=mix if mix is not None else WorkloadMix(0, 0, 0, 1),
            config=self.active, env=self.env, blocks_read=delta.blocks_read,
            blocks_written=delta.blocks_written,
            mean_latency_ns=float(lat.mean()) if n else 0.0,
            p90_latency_ns=float(np.percentile(lat, 90)) if n else 0.0,
            io_per_op=io / n if n else 0.0, seed=seed, ops=n,
        )

    # -- reconfiguration --------------------------------------------------

    def set_target_config(self, cfg: LsmConfig) -> None:
        """Record a new target; levels, buffer and filters move toward it lazily.

        The cache is resized at once. Capacities of a level switch to the target
        only when a compaction writes into that level, and each new run gets the
        target bits-per-key. The policy cannot change online.
        """
        try:
            cfg.validate(self.env)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if cfg.policy is not self.target.policy:
            raise ConfigError("compaction policy cannot change online")
        if cfg == self.target:
            return
        self.target = cfg
        self.epoch += 1
        self.cache.resize(cfg.M_c // self.block_bytes)
        if len(self.buffer) >= self.buffer_capacity:
            self.flush()
        self._maybe_finish_transition()

    @property
    def in_transition(self) -> bool:
        return self.active != self.target

    def _maybe_finish_transition(self) -> None:
        if self.active == self.target:
            return
        for i, level in enumerate(self.levels):
            if level and self.level_epoch[i] != self.epoch:
                return
            if any(r.epoch != self.epoch for r in level):
                return
        self.active = self.target

    # -- lifecycle --------------------------------------------------------

    def close(self) -> None:
        if self.closed:
            return
        self.flush()
        if self.path is not None:
            from .manifest import write_manifest
            write_manifest(self)
        self.store.close()
        self.closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

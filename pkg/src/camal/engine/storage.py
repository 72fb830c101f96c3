"""Run storage backends.

Both backends hand out blocks as ``(keys, values, tombstones)`` lists and
count every block they fetch, independently of the tree's own accounting.

On-disk run layout (little-endian): a run file is a sequence of fixed-size
blocks; each block is a ``u32`` record count followed by ``B`` slots of
``E`` bytes. A slot holds ``u64 key, i32 value_length`` (``-1`` for a
tombstone), the value bytes and zero padding.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .bloom import BloomFilter

_COUNT = struct.Struct("<I")
_SLOT_HEAD = struct.Struct("<Qi")


class StorageError(OSError):
    pass


class MemoryStore:
    """Keeps run arrays in memory; block reads are slices."""

    def __init__(self, block_entries: int):
        self.B = block_entries
        self.fetches = 0
        self._runs: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

    def write_run(self, run_id: int, level: int, keys, vals, tomb) -> None:
        self._runs[run_id] = (keys, vals, tomb)

    def write_filter(self, run_id: int, level: int, bloom: BloomFilter) -> None:
        pass

    def read_block(self, run_id: int, level: int, b: int):
        self.fetches += 1
        keys, vals, tomb = self._runs[run_id]
        lo, hi = b * self.B, (b + 1) * self.B
        return keys[lo:hi].tolist(), vals[lo:hi].tolist(), tomb[lo:hi].tolist()

    def read_run(self, run_id: int, level: int, n_blocks: int):
        self.fetches += n_blocks
        return self._runs[run_id]

    def delete_run(self, run_id: int, level: int) -> None:
        self._runs.pop(run_id, None)

    def close(self) -> None:
        pass


class FileStore:
    """One append-only ``run-<level>-<seq>.dat`` file plus a ``.flt`` filter file per run."""

    def __init__(self, root: str | Path, block_entries: int, entry_bytes: int):
        self.root = Path(root)
        self.B = block_entries
        self.E = entry_bytes
        self.block_bytes = _COUNT.size + block_entries * entry_bytes
        self.fetches = 0
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            probe = self.root / ".write-probe"
            probe.write_bytes(b"")
            probe.unlink()
        except OSError as exc:
            raise StorageError(f"storage path {self.root} is not writable: {exc}") from exc
        self._fds: dict[int, int] = {}

    def data_path(self, run_id: int, level: int) -> Path:
        return self.root / f"run-{level}-{run_id}.dat"

    def filter_path(self, run_id: int, level: int) -> Path:
        return self.root / f"run-{level}-{run_id}.flt"

    def _encode_block(self, keys, vals, tomb) -> bytes:
        out = bytearray(self.block_bytes)
        _COUNT.pack_into(out, 0, len(keys))
        off = _COUNT.size
        limit = self.E - _SLOT_HEAD.size
        for k, v, t in zip(keys, vals, tomb):
            if t:
                _SLOT_HEAD.pack_into(out, off, k, -1)
            else:
                if len(v) > limit:
                    raise StorageError(f"value of {len(v)} bytes exceeds the {limit}-byte slot")
                _SLOT_HEAD.pack_into(out, off, k, len(v))
                out[off + _SLOT_HEAD.size: off + _SLOT_HEAD.size + len(v)] = v
            off += self.E
        return bytes(out)

    def _decode_block(self, data: bytes):
        (count,) = _COUNT.unpack_from(data, 0)
        keys, vals, tomb = [], [], []
        off = _COUNT.size
        for _ in range(count):
            k, vlen = _SLOT_HEAD.unpack_from(data, off)
            keys.append(k)
            if vlen < 0:
                vals.append(None)
                tomb.append(True)
            else:
                start = off + _SLOT_HEAD.size
                vals.append(bytes(data[start:start + vlen]))
                tomb.append(False)
            off += self.E
        return keys, vals, tomb

    def write_run(self, run_id: int, level: int, keys, vals, tomb) -> None:
        keys = keys.tolist()
        vals = vals.tolist()
        tomb = tomb.tolist()
        try:
            with open(self.data_path(run_id, level), "wb") as fh:
                for lo in range(0, len(keys), self.B):
                    hi = lo + self.B
                    fh.write(self._encode_block(keys[lo:hi], vals[lo:hi], tomb[lo:hi]))
        except OSError as exc:
            raise StorageError(str(exc)) from exc

    def write_filter(self, run_id: int, level: int, bloom: BloomFilter) -> None:
        try:
            self.filter_path(run_id, level).write_bytes(bloom.to_bytes())
        except OSError as exc:
            raise StorageError(str(exc)) from exc

    def read_filter(self, run_id: int, level: int) -> BloomFilter:
        return BloomFilter.from_bytes(self.filter_path(run_id, level).read_bytes())

    def _fd(self, run_id: int, level: int) -> int:
        fd = self._fds.get(run_id)
        if fd is None:
            try:
                fd = os.open(self.data_path(run_id, level), os.O_RDONLY)
            except OSError as exc:
                raise StorageError(str(exc)) from exc
            self._fds[run_id] = fd
        return fd

    def read_block(self, run_id: int, level: int, b: int):
        self.fetches += 1
        data = os.pread(self._fd(run_id, level), self.block_bytes, b * self.block_bytes)
        if len(data) != self.block_bytes:
            raise StorageError(f"short read on run {run_id} block {b}")
        return self._decode_block(data)

    def read_run(self, run_id: int, level: int, n_blocks: int):
        keys, vals, tomb = [], [], []
        for b in range(n_blocks):
            k, v, t = self.read_block(run_id, level, b)
            keys += k
            vals += v
            tomb += t
        vals_arr = np.empty(len(vals), dtype=object)
        vals_arr[:] = vals
        return np.array(keys, dtype=np.uint64), vals_arr, np.array(tomb, dtype=bool)

    def delete_run(self, run_id: int, level: int) -> None:
        fd = self._fds.pop(run_id, None)
        if fd is not None:
            os.close(fd)
        for p in (self.data_path(run_id, level), self.filter_path(run_id, level)):
            try:
                p.unlink()
            except FileNotFoundError:
                pass

    def close(self) -> None:
        for fd in self._fds.values():
            os.close(fd)
        self._fds.clear()

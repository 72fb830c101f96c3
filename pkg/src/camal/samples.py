"""Cost measurements and the append-only sample store."""
from __future__ import annotations

import csv
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

from .analytic import Environment, LsmConfig, Policy
from .workload import WorkloadMix

LABEL_KINDS = ("latency", "p90", "io")

SAMPLE_COLUMNS = (
    "workload_id", "v", "r", "q", "w", "s", "policy", "T", "Mb_bytes", "Mf_bytes", "Mc_bytes",
    "N", "E", "B", "blocks_read", "blocks_written", "mean_latency_ns", "p90_latency_ns",
    "io_per_op", "seed",
)


@dataclass(frozen=True)
class CostSample:
    workload_id: int
    mix: WorkloadMix
    config: LsmConfig
    env: Environment
    blocks_read: int
    blocks_written: int
    mean_latency_ns: float
    p90_latency_ns: float
    io_per_op: float
    seed: int = 0
    ops: int = 0

    def label(self, kind: str = "latency") -> float:
        if kind == "latency":
            return self.mean_latency_ns
        if kind == "p90":
            return self.p90_latency_ns
        if kind == "io":
            return self.io_per_op
        raise ValueError(f"unknown label kind {kind!r}; expected one of {LABEL_KINDS}")

    def key(self) -> tuple:
        c, e, m = self.config, self.env, self.mix
        return (self.workload_id, m.v, m.r, m.q, m.w, m.s, c.policy.value, c.T,
                round(c.M_b, 6), round(c.M_f, 6), round(c.M_c, 6), e.N, e.E, e.B, self.seed)

    def row(self) -> dict:
        c, e, m = self.config, self.env, self.mix
        return {
            "workload_id": self.workload_id, "v": repr(m.v), "r": repr(m.r), "q": repr(m.q),
            "w": repr(m.w), "s": m.s, "policy": c.policy.value, "T": c.T,
            "Mb_bytes": repr(float(c.M_b)), "Mf_bytes": repr(float(c.M_f)), "Mc_bytes": repr(float(c.M_c)),
            "N": e.N, "E": e.E, "B": e.B, "blocks_read": self.blocks_read,
            "blocks_written": self.blocks_written, "mean_latency_ns": repr(float(self.mean_latency_ns)),
            "p90_latency_ns": repr(float(self.p90_latency_ns)), "io_per_op": repr(float(self.io_per_op)),
            "seed": self.seed,
        }

    @classmethod
    def from_row(cls, row: dict, min_buffer: float | None = None) -> "CostSample":
        cfg = LsmConfig(T=int(row["T"]), policy=Policy(row["policy"]), M_b=float(row["Mb_bytes"]),
                        M_f=float(row["Mf_bytes"]), M_c=float(row["Mc_bytes"]))
        N, E = int(row["N"]), int(row["E"])
        # the CSV does not carry the buffer floor; any value keeping T_lim >= T will do
        env = Environment(N=N, E=E, B=int(row["B"]), M=cfg.total_memory,
                          min_buffer=min_buffer or min(cfg.M_b, N * E / max(cfg.T, 2)))
        mix = WorkloadMix(float(row["v"]), float(row["r"]), float(row["q"]), float(row["w"]), s=int(row["s"]))
        return cls(int(row["workload_id"]), mix, cfg, env, int(row["blocks_read"]),
                   int(row["blocks_written"]), float(row["mean_latency_ns"]),
                   float(row["p90_latency_ns"]), float(row["io_per_op"]), int(row["seed"]))


class SampleStore:
    """Append-only, duplicate-free collection of :class:`CostSample` rows."""

    def __init__(self, samples: Iterable[CostSample] = ()):
        self._samples: list[CostSample] = []
        self._index: dict[tuple, CostSample] = {}
        self._lock = threading.Lock()
        for s in samples:
            self.append(s)

    def __len__(self) -> int:
        return len(self._samples)

    def __iter__(self) -> Iterator[CostSample]:
        return iter(list(self._samples))

    def __contains__(self, sample: CostSample) -> bool:
        return sample.key() in self._index

    def lookup(self, key: tuple) -> CostSample | None:
        return self._index.get(key)

    def append(self, sample: CostSample) -> bool:
        """Add a sample; returns False (and keeps the original) for a duplicate key."""
        with self._lock:
            k = sample.key()
            if k in self._index:
                return False
            self._index[k] = sample
            self._samples.append(sample)
            return True

    @property
    def samples(self) -> list[CostSample]:
        return list(self._samples)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=SAMPLE_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for s in self._samples:
                writer.writerow(s.row())

    @classmethod
    def from_csv(cls, path: str | Path, min_buffer: float | None = None) -> "SampleStore":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != SAMPLE_COLUMNS:
                raise ValueError(f"{path}: unexpected sample columns {reader.fieldnames}")
            return cls(CostSample.from_row(row, min_buffer) for row in reader)

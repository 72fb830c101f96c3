"""Online retuning: drift detection on operation fractions and lazy retargeting."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .analytic import Environment, LsmConfig, extrapolate
from .engine.tree import LsmTree
from .learner import TrainedModel
from .samples import CostSample
from .tuner import model_argmin
from .workload import (KeyDistribution, KeyUniverse, OperationStream, WorkloadMix, generate_stream,
                       insert_stream, observed_mix)

log = logging.getLogger(__name__)

KINDS = ("v", "r", "q", "w")
EVENT_COLUMNS = ("period", "phase", "trigger_kind", "old_T", "new_T", "old_Mf", "new_Mf",
                 "old_Mb", "new_Mb", "old_Mc", "new_Mc")


@dataclass(frozen=True)
class DetectorConfig:
    p: int = 10_000
    tau: float = 0.10

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("period length p must be at least 1")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")


@dataclass(frozen=True)
class ShiftEvent:
    period: int
    phase: int
    observed: WorkloadMix
    reference: WorkloadMix
    trigger_kind: str
    old: LsmConfig
    new: LsmConfig

    def row(self) -> dict:
        return {"period": self.period, "phase": self.phase, "trigger_kind": self.trigger_kind,
                "old_T": self.old.T, "new_T": self.new.T, "old_Mf": repr(float(self.old.M_f)),
                "new_Mf": repr(float(self.new.M_f)), "old_Mb": repr(float(self.old.M_b)),
                "new_Mb": repr(float(self.new.M_b)), "old_Mc": repr(float(self.old.M_c)),
                "new_Mc": repr(float(self.new.M_c))}


def observe(stream: OperationStream) -> WorkloadMix:
    """Empirical mix of a window of operations (deletes count as writes)."""
    return observed_mix(stream.kinds, stream.selectivity)


def should_reconfigure(observed: WorkloadMix, reference: WorkloadMix, tau: float) -> tuple[bool, str | None]:
    """True, with the kind that moved most, when any fraction moved by more than ``tau``."""
    deltas = np.abs(observed.fractions - reference.fractions)
    i = int(np.argmax(deltas))
    if deltas[i] > tau:
        return True, KINDS[i]
    return False, None


@dataclass
class Retargeter:
    """Maps an observed mix to an engine target through the model.

    The model was trained at ``train_env``. The live engine is viewed at
    training scale (memory equal to the training memory, data shrunk by the
    same factor ``k``), the model argmin is found there and scaled back by
    ``k``. The compaction policy of the live engine is kept. With ``trust``
    set, the search stays near the analytic optimum for the observed mix
    (see ``tuner.trust_region``); ``None`` searches the full range.

    By default the size ratio never rises above the current target. A lazy
    transition cannot remove a level that already exists, so a larger ratio
    does not deliver the shallower tree the model prices in; it only makes
    every merge into a level more expensive.
    """

    model: TrainedModel
    train_env: Environment
    grid_bpk: float = 0.05
    cache_fractions: tuple = (0.0, 0.1, 0.2, 0.3)
    trust: tuple | None = (2, 2.0)
    raise_T: bool = False

    def view(self, live_env: Environment, live_n: int) -> tuple[Environment, float]:
        k = live_env.M / self.train_env.M
        view = Environment(N=max(1, int(round(live_n / k))), E=live_env.E, B=live_env.B,
                           M=self.train_env.M, min_buffer=live_env.min_buffer / k)
        return view, k

    def target(self, tree: LsmTree, mix: WorkloadMix, live_n: int | None = None) -> LsmConfig:
        live_n = live_n or max(tree.env.N, tree.entry_count)
        view, k = self.view(tree.env, live_n)
        start = extrapolate(tree.target, 1.0 / k)
        cfg = model_argmin(self.model, view, [mix], policies=(tree.target.policy,), start=start,
                           grid_bpk=self.grid_bpk, cache_fractions=self.cache_fractions, trust=self.trust,
                           T_max=None if self.raise_T else tree.target.T)
        cfg = extrapolate(cfg, k)
        # keep the budget exact after the scaling round trip
        return LsmConfig(cfg.T, cfg.policy, tree.env.M - cfg.M_f - cfg.M_c, cfg.M_f, cfg.M_c)


def retarget(tree: LsmTree, observed: WorkloadMix, model: TrainedModel, train_env: Environment,
             live_n: int | None = None, period: int = 0, phase: int = 0,
             reference: WorkloadMix | None = None, trigger_kind: str = "") -> ShiftEvent:
    """Point the engine at the model-optimal config for ``observed``."""
    old = tree.target
    new = Retargeter(model, train_env).target(tree, observed, live_n)
    tree.set_target_config(new)
    return ShiftEvent(period, phase, observed, reference or observed, trigger_kind, old, new)


@dataclass
class PhaseResult:
    phase: int
    mix: WorkloadMix
    sample: CostSample
    filler_io: int
    compaction_io: int

    @property
    def io(self) -> int:
        return self.sample.blocks_read + self.sample.blocks_written + self.filler_io


@dataclass
class DynamicRun:
    phases: list = field(default_factory=list)
    events: list = field(default_factory=list)

    @property
    def total_io(self) -> int:
        return sum(p.io for p in self.phases)

    @property
    def compaction_io(self) -> int:
        return sum(p.compaction_io for p in self.phases)

    def write_events(self, path: str | Path) -> None:
        write_event_log(path, self.events)


def write_event_log(path: str | Path, events: Sequence[ShiftEvent]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EVENT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for e in events:
            w.writerow(e.row())


def phase_streams(phases: Sequence[WorkloadMix], ops_per_phase: int, universe: KeyUniverse,
                  filler_per_phase: int, seed: int = 0, distribution: str = "uniform",
                  theta: float = 0.99) -> list[tuple[OperationStream, OperationStream]]:
    """Deterministic (phase stream, filler inserts) pairs; fillers use fresh keys."""
    out = []
    uni = universe
    base = 1 << 40
    for i, mix in enumerate(phases):
        dist = KeyDistribution(distribution, theta, seed=seed * 7919 + i)
        stream = generate_stream(mix, dist, ops_per_phase, uni, value_base=base)
        base += ops_per_phase
        filler = insert_stream(uni, filler_per_phase, value_base=base)
        base += filler_per_phase
        uni = uni.grown(filler_per_phase)
        out.append((stream, filler))
    return out


def filler_size(tree: LsmTree) -> int:
    """One buffer flush of fresh inserts per level."""
    return tree.buffer_capacity * max(1, tree.depth)


def run_dynamic(tree: LsmTree, streams, phases: Sequence[WorkloadMix], detector: DetectorConfig,
                retargeter: Retargeter | None, reference: WorkloadMix, seed: int = 0) -> DynamicRun:
    """Replay phase streams, checking drift every ``p`` operations.

    ``retargeter=None`` gives the control run (same streams, no retargeting).
    """
    run = DynamicRun()
    period = 0
    live_n = tree.env.N
    for i, ((stream, filler), mix) in enumerate(zip(streams, phases)):
        before = tree.stats.copy()
        pieces = []
        for lo in range(0, len(stream), detector.p):
            window = stream.slice(lo, min(lo + detector.p, len(stream)))
            pieces.append(tree.run_workload(window, mix, i, seed))
            if retargeter is not None and len(window) == detector.p:
                obs = observe(window)
                fire, kind = should_reconfigure(obs, reference, detector.tau)
                if fire:
                    old = tree.target
                    new = retargeter.target(tree, obs, live_n)
                    tree.set_target_config(new)
                    run.events.append(ShiftEvent(period, i, obs, reference, kind, old, new))
                    reference = obs
            period += 1
        mid = tree.stats.copy()
        tree.run_workload(filler, None, i, seed)
        live_n += len(filler)
        after = tree.stats
        n = sum(s.ops for s in pieces)
        reads = mid.blocks_read - before.blocks_read
        writes = mid.blocks_written - before.blocks_written
        sample = CostSample(
            i, mix, tree.active, tree.env, reads, writes,
            float(sum(s.mean_latency_ns * s.ops for s in pieces) / n) if n else 0.0,
            float(max((s.p90_latency_ns for s in pieces), default=0.0)),
            (reads + writes) / n if n else 0.0, seed=seed, ops=n)
        filler_io = (after.blocks_read - mid.blocks_read) + (after.blocks_written - mid.blocks_written)
        run.phases.append(PhaseResult(i, mix, sample, filler_io, after.compaction_io - before.compaction_io))
    return run


@dataclass
class DynamicReport:
    dynamic: DynamicRun
    control: DynamicRun
    baseline: DynamicRun
    initial: LsmConfig

    @property
    def transition_io(self) -> int:
        return max(0, self.dynamic.compaction_io - self.control.compaction_io)

    @property
    def transition_share(self) -> float:
        total = self.dynamic.total_io
        return self.transition_io / total if total else 0.0


def dynamic_experiment(env: Environment, phases: Sequence[WorkloadMix], detector: DetectorConfig,
                       model: TrainedModel, train_env: Environment, baseline: LsmConfig,
                       ops_per_phase: int, seed: int = 0, initial: LsmConfig | None = None,
                       policy=None, distribution: str = "uniform",
                       retargeter: Retargeter | None = None) -> DynamicReport:
    """Dynamic run, its no-retarget control, and a static baseline over identical streams.

    The dynamic and control engines start from ``initial`` (default: the
    model argmin for the first phase, in ``policy`` when given); the baseline
    engine runs ``baseline`` throughout. ``retargeter`` overrides the default
    ``Retargeter(model, train_env)``.
    """
    rt = retargeter if retargeter is not None else Retargeter(model, train_env)
    universe = KeyUniverse(env.N, seed=0)
    keys = universe.keys()
    values = [int(k).to_bytes(8, "little") for k in range(env.N)]

    def loaded(cfg: LsmConfig) -> LsmTree:
        t = LsmTree(env, cfg, seed=seed)
        t.bulk_load(keys, values)
        t.stats.reset()
        return t

    if initial is None:
        probe = LsmTree(env, baseline, seed=seed)
        pols = (policy,) if policy is not None else (baseline.policy,)
        view, k = rt.view(env, env.N)
        cfg = model_argmin(model, view, [phases[0]], policies=pols, trust=rt.trust)
        cfg = extrapolate(cfg, k)
        initial = LsmConfig(cfg.T, cfg.policy, env.M - cfg.M_f - cfg.M_c, cfg.M_f, cfg.M_c).validate(env)
        probe.close()
    trees = {name: loaded(c) for name, c in (("dynamic", initial), ("control", initial), ("baseline", baseline))}
    # identical streams for all three engines; filler sized from the dynamic engine's start
    streams = phase_streams(phases, ops_per_phase, universe, filler_size(trees["dynamic"]), seed, distribution)
    runs = {
        "dynamic": run_dynamic(trees["dynamic"], streams, phases, detector, rt, phases[0], seed),
        "control": run_dynamic(trees["control"], streams, phases, detector, None, phases[0], seed),
        "baseline": run_dynamic(trees["baseline"], streams, phases, detector, None, phases[0], seed),
    }
    return DynamicReport(runs["dynamic"], runs["control"], runs["baseline"], initial)

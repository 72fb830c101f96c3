"""Decoupled active-learning tuner seeded by the analytic optima."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .analytic import (Environment, LsmConfig, Policy, best_analytic_config, combined_cost,
                       extrapolate, theoretical_opt_memory, theoretical_opt_T)
from .engine.bloom import LN2_SQ
from .engine.tree import DeviceModel, LsmTree
from .learner import LEVEL_MODES, RAW_FEATURES, TrainedModel, fit, predict
from .samples import LABEL_KINDS, CostSample, SampleStore
from .workload import KeyDistribution, KeyUniverse, WorkloadMix, generate_stream

log = logging.getLogger(__name__)

POLICIES = (Policy.LEVELING, Policy.TIERING)


@dataclass(frozen=True)
class TunerConfig:
    h: int = 20
    samples_per_stage: int = 3
    T_step: int = 2
    bpk_step: float = 2.0
    cache_fractions: tuple = (0.0, 0.1, 0.2, 0.3)
    label_kind: str = "latency"
    model_kind: str = "poly"
    seed: int = 0
    rho: float = 0.0
    rho_draws: int = 20
    grid_bpk: float = 0.05
    trust_region: bool = True  # model argmins stay within the span sampled in that stage
    fp_exponent: float | None = None  # None: ask the evaluator
    level_mode: str | None = None  # None: ask the evaluator
    policies: tuple = POLICIES

    def __post_init__(self):
        if self.h < 0:
            raise ValueError("budget h must be non-negative")
        if self.samples_per_stage < 1:
            raise ValueError("samples_per_stage must be positive")
        if self.T_step <= 0 or self.bpk_step <= 0 or self.grid_bpk <= 0:
            raise ValueError("strides must be positive")
        if self.label_kind not in LABEL_KINDS:
            raise ValueError(f"label_kind must be one of {LABEL_KINDS}")
        if self.model_kind not in ("poly", "trees"):
            raise ValueError("model_kind must be 'poly' or 'trees'")
        if self.level_mode not in (None,) + LEVEL_MODES:
            raise ValueError(f"level_mode must be one of {LEVEL_MODES}")
        if self.rho < 0:
            raise ValueError("rho must be non-negative")
        if any(not 0 <= f < 1 for f in self.cache_fractions):
            raise ValueError("cache fractions must lie in [0, 1)")


# -- evaluators ----------------------------------------------------------------

Evaluator = Callable[[int, WorkloadMix, LsmConfig, int], CostSample]


class AnalyticEvaluator:
    """Noise-free oracle: labels are the relaxed analytic cost (latency = cost x read_ns)."""

    fp_exponent = 1.0
    level_mode = "relaxed"

    def __init__(self, env: Environment, read_ns: float = 10_000.0):
        self.env = env
        self.read_ns = read_ns
        self.calls = 0

    def __call__(self, workload_id: int, mix: WorkloadMix, cfg: LsmConfig, seed: int = 0) -> CostSample:
        self.calls += 1
        c = float(combined_cost(self.env, mix, cfg.policy, cfg.T, cfg.M_b, cfg.M_f))
        return CostSample(workload_id, mix, cfg, self.env, 0, 0, c * self.read_ns, c * self.read_ns, c,
                          seed=seed)


class EngineEvaluator:
    """Measures a config on a fresh in-memory engine.

    The tree is bulk-loaded with ``env.N`` keys, warmed up with a stream of
    ``warmup`` x ``ops`` operations, then measured on ``ops`` operations.
    """

    fp_exponent = LN2_SQ
    level_mode = "relaxed"

    def __init__(self, env: Environment, ops: int = 20_000, warmup: float = 0.1,
                 distribution: str = "uniform", theta: float = 0.99, device: DeviceModel | None = None):
        self.env = env
        self.ops = ops
        self.warmup = warmup
        self.distribution = distribution
        self.theta = theta
        self.device = device
        self.universe = KeyUniverse(env.N, seed=0)
        self._keys = self.universe.keys()
        self._values = [int(k).to_bytes(8, "little") for k in range(env.N)]
        self.calls = 0

    def __call__(self, workload_id: int, mix: WorkloadMix, cfg: LsmConfig, seed: int = 0) -> CostSample:
        self.calls += 1
        tree = LsmTree(self.env, cfg, seed=seed, device=self.device)
        tree.bulk_load(self._keys, self._values)
        n_warm = int(self.ops * self.warmup)
        dist = KeyDistribution(self.distribution, self.theta, seed=seed * 1_000_003 + workload_id)
        stream = generate_stream(mix, dist, n_warm + self.ops, self.universe, value_base=1 << 32)
        if n_warm:
            tree.run_workload(stream.slice(0, n_warm), mix, workload_id, seed)
        return tree.run_workload(stream.slice(n_warm, len(stream)), mix, workload_id, seed)


# -- model search --------------------------------------------------------------

def raw_rows(env: Environment, mixes: Sequence[WorkloadMix], policy: Policy, T, M_b, M_f, M_c) -> np.ndarray:
    """Feature rows for every (mix, candidate) pair, mix-major."""
    T, M_b, M_f, M_c = np.broadcast_arrays(*(np.asarray(a, dtype=float).ravel() for a in (T, M_b, M_f, M_c)))
    n = len(T)
    blocks = []
    for m in mixes:
        blocks.append(np.column_stack([
            np.full(n, env.N), np.full(n, env.E), np.full(n, env.B), T, M_b, M_c, M_f,
            np.full(n, m.v), np.full(n, m.r), np.full(n, m.q), np.full(n, m.w), np.full(n, m.s),
            np.full(n, 1.0 if Policy(policy) is Policy.TIERING else 0.0),
        ]))
    out = np.vstack(blocks)
    assert out.shape[1] == len(RAW_FEATURES)
    return out


def mean_prediction(model: TrainedModel, env: Environment, mixes: Sequence[WorkloadMix], policy: Policy,
                    T, M_b, M_f, M_c) -> np.ndarray:
    rows = raw_rows(env, mixes, policy, T, M_b, M_f, M_c)
    return predict(model, rows).reshape(len(mixes), -1).mean(axis=0)


def bpk_grid(env: Environment, step: float, M_c: float = 0.0) -> np.ndarray:
    """Filter memory candidates (bytes) on a bits-per-key grid, buffer kept >= min_buffer."""
    hi = max(0.0, env.M - M_c - env.min_buffer)
    bpk = np.arange(0.0, hi * 8.0 / env.N + 1e-12, step)
    return bpk * env.N / 8.0


def _argmin_near(pred: np.ndarray, distance: np.ndarray) -> int:
    """Index of the smallest prediction; ties go to the smallest ``distance``.

    Tree models are piecewise constant, so wide plateaus of equal prediction
    are common; inside a plateau the model has no preference and the
    candidate nearest the analytic seed is kept.
    """
    m = float(np.min(pred))
    tied = np.flatnonzero(pred <= m + 1e-12 * max(1.0, abs(m)))
    return int(tied[int(np.argmin(distance[tied]))])


def argmin_T(model, env, mixes, policy, M_b, M_f, M_c=0.0, anchor: float | None = None,
             bounds: tuple | None = None) -> int:
    """Model-optimal integer T in ``bounds`` (default [2, T_lim]); ties resolved toward ``anchor``."""
    lo, hi = bounds if bounds is not None else (2, env.T_lim)
    Ts = np.arange(max(2, int(lo)), min(env.T_lim, int(hi)) + 1)
    pred = mean_prediction(model, env, mixes, policy, Ts, M_b, M_f, M_c)
    dist = np.abs(np.log(Ts / anchor)) if anchor else Ts.astype(float)
    return int(Ts[_argmin_near(pred, dist)])


def argmin_memory(model, env, mixes, policy, T, step, M_c=0.0, extra=(),
                  anchor: float | None = None, bounds: tuple | None = None) -> tuple[float, float]:
    """Model-optimal (M_b, M_f) at fixed T and M_c over the grid plus ``extra`` filter sizes.

    ``bounds`` limits the grid to filter sizes (bytes) inside ``[lo, hi]``.
    """
    grid = bpk_grid(env, step, M_c)
    if bounds is not None:
        grid = grid[(grid >= bounds[0] - 1e-9) & (grid <= bounds[1] + 1e-9)]
    M_f = np.concatenate([grid, np.asarray(extra, dtype=float)])
    M_b = env.M - M_c - M_f
    pred = mean_prediction(model, env, mixes, policy, T, M_b, M_f, M_c)
    dist = np.abs(M_f - anchor) if anchor is not None else np.arange(len(M_f), dtype=float)
    i = _argmin_near(pred, dist)
    return float(M_b[i]), float(M_f[i])


def cache_candidates(env: Environment, cfg: LsmConfig, fractions) -> list[LsmConfig]:
    """Move ``f * M`` bytes from the buffer to the cache, never below the minimum buffer."""
    out = []
    for f in fractions:
        M_c = min(f * env.M, max(0.0, cfg.M_b + cfg.M_c - env.min_buffer))
        out.append(LsmConfig(cfg.T, cfg.policy, cfg.M_b + cfg.M_c - M_c, cfg.M_f, M_c))
    return out


def predicted_cost(model: TrainedModel | None, env: Environment, mixes, cfg: LsmConfig) -> float:
    if model is None:
        return float(np.mean([combined_cost(env, m, cfg.policy, cfg.T, cfg.M_b, cfg.M_f) for m in mixes]))
    return float(mean_prediction(model, env, mixes, cfg.policy, cfg.T, cfg.M_b, cfg.M_f, cfg.M_c)[0])


def trust_region(env: Environment, mix: WorkloadMix, policy: Policy, T_step: int = 2,
                 bpk_step: float = 2.0) -> tuple[tuple[int, int], tuple[float, float]]:
    """(T span, filter-bytes span) of the sampling neighborhoods around the analytic optimum."""
    T0 = theoretical_opt_T(env, mix, policy)
    Ts = T_neighborhood(T0, T_step, env.T_lim)
    _, M_f0 = theoretical_opt_memory(env, mix, T0, policy)
    fs = bpk_neighborhood(env, M_f0, bpk_step)
    return (min(Ts), max(Ts)), (min(fs), max(fs))


def model_argmin(model: TrainedModel, env: Environment, mixes: Sequence[WorkloadMix],
                 policies=POLICIES, start: LsmConfig | None = None, grid_bpk: float = 0.05,
                 cache_fractions=(0.0, 0.1, 0.2, 0.3), rounds: int = 3,
                 trust: tuple[int, float] | None = None, T_max: int | None = None) -> LsmConfig:
    """Coordinate descent on the model's mean prediction over ``mixes``.

    Alternates T (all integers), the buffer/filter split (bits-per-key grid)
    and the cache fraction, starting from ``start`` or the analytic optimum.
    ``trust=(T_step, bpk_step)`` confines T and the filter size to the
    three-point neighborhoods of the analytic optimum, the region a tuning
    stage would have sampled. ``T_max`` caps the size ratio.
    """
    best = None
    for policy in policies:
        T_span = M_f_span = None
        if trust is not None:
            T_span, M_f_span = trust_region(env, mixes[0], policy, *trust)
        if T_max is not None:
            lo, hi = T_span if T_span is not None else (2, env.T_lim)
            T_span = (min(lo, T_max), min(hi, T_max))
        if start is not None and start.policy is policy:
            cfg = start
        else:
            T0 = theoretical_opt_T(env, mixes[0], policy)
            M_b, M_f = theoretical_opt_memory(env, mixes[0], T0, policy)
            cfg = LsmConfig(T0, policy, M_b, M_f, 0.0)
        cost = predicted_cost(model, env, mixes, cfg)
        for _ in range(rounds):
            prev = cost
            T = argmin_T(model, env, mixes, policy, cfg.M_b, cfg.M_f, cfg.M_c, anchor=cfg.T, bounds=T_span)
            cfg = LsmConfig(T, policy, cfg.M_b, cfg.M_f, cfg.M_c)
            inside = M_f_span is None or M_f_span[0] - 1e-9 <= cfg.M_f <= M_f_span[1] + 1e-9
            M_b, M_f = argmin_memory(model, env, mixes, policy, T, grid_bpk, cfg.M_c,
                                     extra=(cfg.M_f,) if inside else (), anchor=cfg.M_f, bounds=M_f_span)
            cfg = LsmConfig(T, policy, M_b, M_f, cfg.M_c)
            cands = cache_candidates(env, cfg, cache_fractions) + [cfg]
            costs = [predicted_cost(model, env, mixes, c) for c in cands]
            cfg = cands[int(np.argmin(costs))]
            cost = min(costs)
            if cost >= prev:
                break
        if best is None or cost < best[0]:
            best = (cost, cfg)
    return best[1]


# -- decoupled active learning -------------------------------------------------

def _window(center: float, step: float, lo: float, hi: float, count: int) -> list[float]:
    """``count`` points spaced by ``step`` around ``center``, shifted to fit in [lo, hi]."""
    half = (count - 1) / 2.0
    c = min(max(center, lo + half * step), hi - half * step)
    if hi - lo < (count - 1) * step:
        c = 0.5 * (lo + hi)
    pts = [c + (i - half) * step for i in range(count)]
    return [min(max(p, lo), hi) for p in pts]


def T_neighborhood(T_star: int, step: int, T_lim: int, count: int = 3) -> list[int]:
    pts = _window(T_star, step, 2, T_lim, count)
    out = []
    for p in pts:
        t = int(round(p))
        if t not in out:
            out.append(t)
    return out


def bpk_neighborhood(env: Environment, M_f_star: float, step: float, count: int = 3) -> list[float]:
    """Filter sizes (bytes) at ``M_f_star`` +- ``step`` bits per key, kept inside [0, M - min_buffer]."""
    hi = env.max_filter_bytes * 8.0 / env.N
    pts = _window(M_f_star * 8.0 / env.N, step, 0.0, hi, count)
    out = []
    for p in pts:
        b = p * env.N / 8.0
        if not any(math.isclose(b, o, rel_tol=1e-12, abs_tol=1e-9) for o in out):
            out.append(b)
    # the analytic optimum itself is sampled exactly when it is not shifted away
    return out


@dataclass
class TuneResult:
    store: SampleStore
    configs: dict
    model: TrainedModel | None = None
    requests: dict = field(default_factory=dict)  # (workload, policy) -> sample requests
    evaluations: dict = field(default_factory=dict)  # (workload, policy) -> evaluator invocations
    failures: int = 0
    history: dict = field(default_factory=dict)  # (workload, policy) -> incumbent predicted cost per stage
    policy_configs: dict = field(default_factory=dict)  # (workload, policy) -> tuned config

    def __iter__(self):
        return iter((self.store, self.configs))


class _Session:
    def __init__(self, env, tcfg: TunerConfig, evaluator: Evaluator, store: SampleStore | None):
        self.env = env
        self.tcfg = tcfg
        self.evaluator = evaluator
        self.store = store if store is not None else SampleStore()
        fp = tcfg.fp_exponent
        self.fp_exponent = fp if fp is not None else getattr(evaluator, "fp_exponent", 1.0)
        lm = tcfg.level_mode
        self.level_mode = lm if lm is not None else getattr(evaluator, "level_mode", "relaxed")
        self.model: TrainedModel | None = None
        self.result = TuneResult(self.store, {})

    def sample(self, wid: int, mix: WorkloadMix, cfg: LsmConfig, key) -> CostSample | None:
        res = self.result
        res.requests[key] = res.requests.get(key, 0) + 1
        probe = CostSample(wid, mix, cfg, self.env, 0, 0, 0.0, 0.0, 0.0, seed=self.tcfg.seed)
        cached = self.store.lookup(probe.key())
        if cached is not None:
            return cached
        res.evaluations[key] = res.evaluations.get(key, 0) + 1
        try:
            s = self.evaluator(wid, mix, cfg, self.tcfg.seed)
        except Exception as exc:  # noqa: BLE001 - evaluator failures are logged and skipped
            log.warning("evaluator failed on workload %s config %s: %s", wid, cfg, exc)
            res.failures += 1
            return None
        self.store.append(s)
        return s

    def retrain(self) -> None:
        samples = self.store.samples
        if len(samples) < 2:
            self.model = None
            return
        kw = dict(label=self.tcfg.label_kind, seed=self.tcfg.seed)
        if self.tcfg.model_kind == "poly":
            import warnings
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                self.model = fit("poly", samples, strict=False, fp_exponent=self.fp_exponent,
                                 level_mode=self.level_mode, **kw)
        else:
            self.model = fit("trees", samples, **kw)

    def tune_policy(self, wid: int, mix: WorkloadMix, policy: Policy, budget: int) -> LsmConfig:
        env, t = self.env, self.tcfg
        key = (wid, policy.value)
        hist = self.result.history.setdefault(key, [])
        k = t.samples_per_stage

        # stage 1: size ratio
        T_star = theoretical_opt_T(env, mix, policy)
        M_b, M_f = theoretical_opt_memory(env, mix, T_star, policy)
        cfg = LsmConfig(T_star, policy, M_b, M_f, 0.0)
        nbhd_T = T_neighborhood(T_star, t.T_step, env.T_lim, k)
        ok = [T for T in nbhd_T[:budget]
              if self.sample(wid, mix, LsmConfig(T, policy, M_b, M_f, 0.0), key) is not None]
        budget -= min(budget, len(nbhd_T))
        if ok:
            self.retrain()
            span = (min(ok + [T_star]), max(ok + [T_star])) if t.trust_region else None
            T1 = argmin_T(self.model, env, [mix], policy, M_b, M_f, anchor=T_star, bounds=span) \
                if self.model else T_star
            cfg = LsmConfig(T1, policy, M_b, M_f, 0.0)
        hist.append(predicted_cost(self.model, env, [mix], cfg))

        # stage 2: buffer / filter split at the fixed T
        M_b2, M_f2 = theoretical_opt_memory(env, mix, cfg.T, policy)
        analytic2 = LsmConfig(cfg.T, policy, M_b2, M_f2, 0.0)
        nbhd = bpk_neighborhood(env, M_f2, t.bpk_step, k)
        ok = [mf for mf in nbhd[:budget]
              if self.sample(wid, mix, LsmConfig(cfg.T, policy, env.M - mf, mf, 0.0), key) is not None]
        budget -= min(budget, len(nbhd))
        if ok and self.model is not None:
            self.retrain()
            span = (min(ok + [M_f2]), max(ok + [M_f2])) if t.trust_region else None
            M_b3, M_f3 = argmin_memory(self.model, env, [mix], policy, cfg.T, t.grid_bpk,
                                       extra=(M_f2,), anchor=M_f2, bounds=span)
            cfg = LsmConfig(cfg.T, policy, M_b3, M_f3, 0.0)
        else:
            cfg = analytic2
        hist.append(predicted_cost(self.model, env, [mix], cfg))

        # stage 3: cache share taken from the buffer (the analytic model is cache-blind)
        cands = cache_candidates(env, cfg, t.cache_fractions)
        got = 0
        for c in cands[:budget]:
            got += self.sample(wid, mix, c, key) is not None
        if got and self.model is not None:
            self.retrain()
            tried = cands[:budget] + [cfg]
            costs = [predicted_cost(self.model, env, [mix], c) for c in tried]
            cfg = tried[int(np.argmin(costs))]
        hist.append(predicted_cost(self.model, env, [mix], cfg))
        return cfg


def _policy_budgets(h: int, n: int) -> list[int]:
    return [h // n + (1 if i < h % n else 0) for i in range(n)]


def decoupled_al(workloads: Sequence[WorkloadMix], env: Environment, tcfg: TunerConfig,
                 evaluator: Evaluator, store: SampleStore | None = None,
                 workload_ids: Sequence[int] | None = None) -> TuneResult:
    """Tune every workload in turn, one parameter group per stage.

    Per workload and policy: sample T around the analytic size ratio and fix
    it at the model argmin; sample bits-per-key around the analytic memory
    split and fix it; sample cache shares and fix the cheapest. One model is
    retrained on the pooled samples of all workloads after each stage. The
    budget ``h`` is split evenly between policies and caps sample requests;
    with no budget the analytic optimum is returned.
    """
    session = _Session(env, tcfg, evaluator, store)
    res = session.result
    ids = list(workload_ids) if workload_ids is not None else list(range(len(workloads)))
    for wid, mix in zip(ids, workloads):
        if tcfg.h == 0:
            res.configs[wid] = best_analytic_config(env, mix, tcfg.policies)
            continue
        tuned = {}
        for policy, budget in zip(tcfg.policies, _policy_budgets(tcfg.h, len(tcfg.policies))):
            if budget == 0:
                T = theoretical_opt_T(env, mix, policy)
                tuned[policy] = LsmConfig(T, policy, *theoretical_opt_memory(env, mix, T, policy), 0.0)
            else:
                tuned[policy] = session.tune_policy(wid, mix, policy, budget)
            res.policy_configs[(wid, policy.value)] = tuned[policy]
        costs = {p: predicted_cost(session.model, env, [mix], c) for p, c in tuned.items()}
        res.configs[wid] = tuned[min(costs, key=costs.get)]
    res.model = session.model
    return res


def tune_with_extrapolation(workloads: Sequence[WorkloadMix], env_small: Environment, k: float,
                            tcfg: TunerConfig, evaluator_small: Evaluator,
                            store: SampleStore | None = None) -> TuneResult:
    """Tune at the small scale, then map each config to ``(k*N, k*M)`` keeping T."""
    res = decoupled_al(workloads, env_small, tcfg, evaluator_small, store)
    big = env_small.scaled(k)
    res.configs = {w: extrapolate(c, k).validate(big) if k != 1 else c for w, c in res.configs.items()}
    return res


# -- robust tuning -------------------------------------------------------------

def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    mask = p > 0
    if np.any(q[mask] <= 0):
        return math.inf
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def sample_kl_ball(mix: WorkloadMix, rho: float, draws: int, seed: int = 0,
                   max_attempts: int = 100_000) -> list[WorkloadMix]:
    """``draws`` mixes with ``KL(mix' || mix) <= rho``, by Dirichlet proposals and rejection."""
    if rho < 0:
        raise ValueError("rho must be non-negative")
    if draws < 1:
        raise ValueError("need at least one draw")
    if rho == 0:
        return [mix] * draws
    base = mix.fractions
    support = base > 0
    alpha0 = max(1.0, (support.sum() - 1) / rho)
    rng = np.random.default_rng([seed, 0xD1CE])
    out: list[WorkloadMix] = []
    attempts = 0
    while len(out) < draws:
        if attempts >= max_attempts:
            raise ValueError(f"uncertainty radius {rho} admits no draws after {attempts} proposals")
        batch = rng.dirichlet(alpha0 * base[support], size=256)
        attempts += len(batch)
        for row in batch:
            full = np.zeros_like(base)
            full[support] = row
            if kl_divergence(full, base) <= rho:
                full = full / full.sum()
                out.append(mix.with_fractions(full))
                if len(out) == draws:
                    break
    return out


def robust_tune(mix: WorkloadMix, rho: float, rho_draws: int, model: TrainedModel, env: Environment,
                seed: int = 0, policies=POLICIES, grid_bpk: float = 0.05,
                cache_fractions=(0.0, 0.1, 0.2, 0.3)) -> LsmConfig:
    """Config minimising the mean predicted cost over mixes drawn from the KL ball around ``mix``."""
    mixes = sample_kl_ball(mix, rho, 1 if rho == 0 else rho_draws, seed)
    return model_argmin(model, env, mixes, policies, grid_bpk=grid_bpk, cache_fractions=cache_fractions)

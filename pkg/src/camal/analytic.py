"""Complexity-based LSM-tree cost models and their closed-form optimisers.

Memory quantities are bytes everywhere; the filter term uses filter *bits*
per entry, ``exp(-8 * M_f / N)``, without the ln(2)^2 Bloom constant.

Two level-count forms are provided. ``level_count`` is the integer (ceiling)
count used for tree structure. The optimisers work on the relaxed count
``log_T(N*E/M_b + 1)``; its T-derivative is what yields the root condition
``w*T*(ln T - 1) = q*B`` and it makes T* independent of the memory split.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from .workload import WorkloadMix

BLOCK_BYTES = 4096
MB = 1 << 20


class Policy(str, enum.Enum):
    LEVELING = "leveling"
    TIERING = "tiering"


@dataclass(frozen=True)
class Environment:
    N: int
    E: int = 1024
    B: int | None = None
    M: float = 16 * MB
    min_buffer: float = 1 * MB

    def __post_init__(self):
        if self.B is None:
            object.__setattr__(self, "B", max(1, BLOCK_BYTES // self.E))
        for name in ("N", "E", "B", "M", "min_buffer"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.T_lim < 2:
            raise ValueError(f"T_lim = {self.N * self.E / self.min_buffer:.3g} < 2; shrink min_buffer")

    @property
    def data_bytes(self) -> float:
        return float(self.N) * self.E

    @property
    def T_lim(self) -> int:
        return int(self.data_bytes // self.min_buffer)

    @property
    def max_filter_bytes(self) -> float:
        return self.M - self.min_buffer

    def scaled(self, k: float) -> "Environment":
        """Same hardware facts with data size and memory multiplied by ``k``."""
        return replace(self, N=int(round(self.N * k)), M=self.M * k)


@dataclass(frozen=True)
class LsmConfig:
    T: int
    policy: Policy = Policy.LEVELING
    M_b: float = 1 * MB
    M_f: float = 0.0
    M_c: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "policy", Policy(self.policy))

    @property
    def total_memory(self) -> float:
        return self.M_b + self.M_f + self.M_c

    def bits_per_key(self, N: int) -> float:
        return 8.0 * self.M_f / N

    def validate(self, env: Environment) -> "LsmConfig":
        if not 2 <= self.T <= env.T_lim:
            raise ValueError(f"size ratio {self.T} outside [2, {env.T_lim}]")
        if self.M_b < env.min_buffer * (1 - 1e-12):
            raise ValueError(f"write buffer {self.M_b:.0f} B below minimum {env.min_buffer:.0f} B")
        if self.M_f < 0 or self.M_c < 0:
            raise ValueError("memory allocations must be non-negative")
        if not math.isclose(self.total_memory, env.M, rel_tol=1e-9, abs_tol=1e-6):
            raise ValueError(f"M_b + M_f + M_c = {self.total_memory:.0f} B, expected {env.M:.0f} B")
        return self


def default_config(env: Environment, bits_per_key: float = 10.0, T: int = 10) -> LsmConfig:
    """Rule-of-thumb baseline: leveling, size ratio 10, 10 bits per key, rest to the buffer."""
    M_f = min(bits_per_key * env.N / 8.0, env.max_filter_bytes)
    return LsmConfig(T=min(T, env.T_lim), policy=Policy.LEVELING, M_b=env.M - M_f, M_f=M_f)


@dataclass(frozen=True)
class CostBreakdown:
    V: float
    R: float
    Q: float
    W: float
    combined: float


@dataclass(frozen=True)
class CalibrationConstants:
    I_r: float = 1.0
    I_w: float = 1.0
    C_r: float = 0.01
    C_w: float = 0.01
    C_q: float = 0.01

    def __post_init__(self):
        if min(self.I_r, self.I_w, self.C_r, self.C_w, self.C_q) < 0 or self.I_r <= 0:
            raise ValueError("calibration constants must be non-negative with I_r > 0")

    def scaled(self, c: float) -> "CalibrationConstants":
        return CalibrationConstants(*(c * x for x in (self.I_r, self.I_w, self.C_r, self.C_w, self.C_q)))


def level_count(env: Environment, T: int, M_b: float) -> int:
    """Ceiling level count ``ceil(log_T(N*E/M_b + 1))``, at least 1."""
    if T < 2:
        raise ValueError("size ratio must be at least 2")
    if M_b <= 0:
        raise ValueError("write buffer must be positive")
    target = env.data_bytes / M_b + 1.0
    L, cap = 1, T
    while cap < target * (1 - 1e-12):
        L += 1
        cap *= T
    return L


def relaxed_levels(env: Environment, T, M_b):
    """Continuous level count ``log_T(N*E/M_b + 1)``; broadcasts over arrays."""
    return np.log(env.data_bytes / np.asarray(M_b, dtype=float) + 1.0) / np.log(np.asarray(T, dtype=float))


def _false_positive_term(env: Environment, M_f):
    return np.exp(-8.0 * np.asarray(M_f, dtype=float) / env.N)


def cost_terms(env: Environment, T, M_b, M_f, s: float, policy: Policy, relaxed: bool = True):
    """Per-operation I/O costs (V, R, Q, W); vectorised over T / M_b / M_f when ``relaxed``."""
    policy = Policy(policy)
    if relaxed:
        L = relaxed_levels(env, T, M_b)
    else:
        L = level_count(env, int(T), float(M_b))
    T = np.asarray(T, dtype=float)
    p = _false_positive_term(env, M_f)
    B = env.B
    if policy is Policy.LEVELING:
        V = p
        Q = L + s / B
        W = L * T / B
    else:
        V = p * T
        Q = L * T + T * s / B
        W = L / B
    R = V + 1.0
    return V, R, Q, W


def cost(env: Environment, cfg: LsmConfig, mix: WorkloadMix, relaxed: bool = False) -> CostBreakdown:
    """Expected I/Os per operation of each kind and their mix-weighted mean.

    ``relaxed=False`` uses the integer level count of the built tree.
    """
    V, R, Q, W = (float(x) for x in cost_terms(env, cfg.T, cfg.M_b, cfg.M_f, mix.s, cfg.policy, relaxed))
    combined = mix.v * V + mix.r * R + mix.q * Q + mix.w * W
    return CostBreakdown(V, R, Q, W, combined)


def combined_cost(env: Environment, mix: WorkloadMix, policy: Policy, T, M_b, M_f):
    """Vectorised relaxed combined cost."""
    V, R, Q, W = cost_terms(env, T, M_b, M_f, mix.s, policy, relaxed=True)
    return mix.v * V + mix.r * R + mix.q * Q + mix.w * W


def root_residual(T, mix: WorkloadMix, B: int):
    """``w*T*(ln T - 1) - q*B``: sign of the leveling cost's T-derivative."""
    T = np.asarray(T, dtype=float)
    return mix.w * T * (np.log(T) - 1.0) - mix.q * B


def continuous_root(mix: WorkloadMix, B: int, lo: float = 2.0, hi: float = 1e12, tol: float = 1e-12):
    """Root of the residual in [lo, hi] by bisection, or None when it has no sign change."""
    f_lo, f_hi = root_residual(lo, mix, B), root_residual(hi, mix, B)
    if f_lo > 0 or f_hi < 0 or (f_lo == 0 and f_hi == 0):
        return None
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if root_residual(mid, mix, B) < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * hi:
            break
    return 0.5 * (lo + hi)


def _leveling_shape(T, mix: WorkloadMix, B: int):
    # relaxed leveling cost = ln(N*E/M_b + 1) * shape(T) + (terms free of T)
    T = np.asarray(T, dtype=float)
    return (mix.q + mix.w * T / B) / np.log(T)


def theoretical_opt_T(env: Environment, mix: WorkloadMix, policy: Policy = Policy.LEVELING,
                      M_f: float | None = None) -> int:
    """Integer size ratio in [2, T_lim] minimising the relaxed cost.

    Leveling: bracket the root of ``w*T*(ln T - 1) = q*B`` and keep the cheaper
    neighbouring integer (the memory split never enters). Tiering: integer scan,
    at the given ``M_f`` (buffer takes the rest) or, when ``M_f`` is None, with
    the memory split re-optimised for every T.
    """
    policy = Policy(policy)
    T_lim = env.T_lim
    if policy is Policy.LEVELING:
        root = continuous_root(mix, env.B)
        if root is None:
            cands = [2, T_lim]
        else:
            lo = min(max(2, math.floor(root)), T_lim)
            cands = sorted({lo, min(lo + 1, T_lim)})
        vals = _leveling_shape(np.array(cands), mix, env.B)
        return int(cands[int(np.argmin(vals))])

    Ts = np.arange(2, T_lim + 1)
    if M_f is None:
        m = optimal_filter_bytes(env, mix, Ts, policy)
        vals = combined_cost(env, mix, policy, Ts, env.M - m, m)
    else:
        vals = combined_cost(env, mix, policy, Ts, env.M - M_f, M_f)
    return int(Ts[int(np.argmin(vals))])


def memory_derivative(env: Environment, mix: WorkloadMix, T, policy: Policy, M_f):
    """d(relaxed cost)/d(M_f) in per-byte units with ``M_b = M - M_f``; broadcasts over T and M_f."""
    M_f = np.asarray(M_f, dtype=float)
    T = np.asarray(T, dtype=float)
    M_b = env.M - M_f
    p = _false_positive_term(env, M_f)
    dL = env.data_bytes / (M_b * (env.data_bytes + M_b) * np.log(T))
    if Policy(policy) is Policy.LEVELING:
        read = -(8.0 / env.N) * (mix.v + mix.r) * p
        slope = mix.q + mix.w * T / env.B
    else:
        read = -(8.0 / env.N) * (mix.v + mix.r) * p * T
        slope = mix.q * T + mix.w / env.B
    return read + slope * dL


def optimal_filter_bytes(env: Environment, mix: WorkloadMix, T, policy: Policy = Policy.LEVELING,
                         tol_bpk: float = 1e-4) -> np.ndarray:
    """Cost-minimising ``M_f`` for each size ratio in ``T`` (buffer takes the rest, no cache).

    The derivative is increasing in ``M_f`` (convex cost), so a sign change on
    ``[0, M - min_buffer]`` is unique and found by bisection; otherwise clamp.
    All size ratios are bisected together with the same number of halvings.
    """
    hi = env.max_filter_bytes
    if hi < 0:
        raise ValueError("total memory below the minimum write buffer")
    T = np.atleast_1d(np.asarray(T, dtype=float))
    lo_b, hi_b = np.zeros_like(T), np.full_like(T, hi)
    tol = tol_bpk * env.N / 8.0
    steps = max(0, math.ceil(math.log2(hi / tol))) if hi > tol else 0
    for _ in range(steps):
        mid = 0.5 * (lo_b + hi_b)
        neg = memory_derivative(env, mix, T, policy, mid) < 0
        lo_b = np.where(neg, mid, lo_b)
        hi_b = np.where(neg, hi_b, mid)
    M_f = 0.5 * (lo_b + hi_b)
    M_f = np.where(memory_derivative(env, mix, T, policy, 0.0) >= 0, 0.0, M_f)
    M_f = np.where(memory_derivative(env, mix, T, policy, hi) <= 0, hi, M_f)
    return M_f


def theoretical_opt_memory(env: Environment, mix: WorkloadMix, T: int,
                           policy: Policy = Policy.LEVELING, tol_bpk: float = 1e-4) -> tuple[float, float]:
    """Buffer/filter split ``(M_b, M_f)`` with ``M_c = 0`` minimising the relaxed cost at fixed T."""
    M_f = float(optimal_filter_bytes(env, mix, T, policy, tol_bpk)[0])
    return env.M - M_f, M_f


def analytic_config(env: Environment, mix: WorkloadMix, policy: Policy = Policy.LEVELING) -> LsmConfig:
    T = theoretical_opt_T(env, mix, policy)
    M_b, M_f = theoretical_opt_memory(env, mix, T, policy)
    return LsmConfig(T=T, policy=Policy(policy), M_b=M_b, M_f=M_f, M_c=0.0)


def best_analytic_config(env: Environment, mix: WorkloadMix,
                         policies=(Policy.LEVELING, Policy.TIERING)) -> LsmConfig:
    cfgs = [analytic_config(env, mix, p) for p in policies]
    return min(cfgs, key=lambda c: cost(env, c, mix, relaxed=True).combined)


def calibrated_cost(env: Environment, cfg: LsmConfig, mix: WorkloadMix,
                    constants: CalibrationConstants = CalibrationConstants(), relaxed: bool = True) -> float:
    """Total per-operation overhead of a leveled tree, CPU work included."""
    if Policy(cfg.policy) is not Policy.LEVELING:
        raise ValueError("calibrated cost is defined for leveling only")
    return float(calibrated_cost_grid(env, mix, cfg.T, cfg.M_b, cfg.M_f, constants, relaxed))


def calibrated_cost_grid(env: Environment, mix: WorkloadMix, T, M_b, M_f,
                         constants: CalibrationConstants = CalibrationConstants(), relaxed: bool = True):
    c = constants
    if relaxed:
        L = relaxed_levels(env, T, M_b)
    else:
        L = level_count(env, int(T), float(M_b))
    T = np.asarray(T, dtype=float)
    p = _false_positive_term(env, M_f)
    B = env.B
    return (c.I_r * mix.v * p + c.I_r * mix.r * (p + 1.0) + 2.0 * c.C_r * L
            + c.I_r * mix.q * (L + mix.s / B) + c.C_q * L
            + (c.I_w + c.I_r) * L * T / B + c.C_w * T * L)


def calibrated_opt(env: Environment, mix: WorkloadMix, constants: CalibrationConstants = CalibrationConstants(),
                   bpk_step: float = 0.05) -> LsmConfig:
    """Joint minimiser of the calibrated cost over integer T and a bits-per-key grid."""
    Ts = np.arange(2, env.T_lim + 1, dtype=float)[:, None]
    M_f = np.arange(0.0, env.max_filter_bytes * 8 / env.N + 1e-12, bpk_step) * env.N / 8.0
    M_f = M_f[None, :]
    g = calibrated_cost_grid(env, mix, Ts, env.M - M_f, M_f, constants)
    i, j = np.unravel_index(int(np.argmin(g)), g.shape)
    mf = float(M_f[0, j])
    return LsmConfig(T=int(Ts[i, 0]), policy=Policy.LEVELING, M_b=env.M - mf, M_f=mf)


def extrapolate(cfg: LsmConfig, k: float) -> LsmConfig:
    """Map a configuration tuned at (N, M) onto (k*N, k*M): keep T, scale memory by k.

    Scaling the block cache along with the buffer and filters keeps the budget whole.
    """
    if not k > 0:
        raise ValueError("scale factor must be positive")
    return replace(cfg, M_b=cfg.M_b * k, M_f=cfg.M_f * k, M_c=cfg.M_c * k)

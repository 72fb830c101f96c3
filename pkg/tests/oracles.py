"""Independent brute-force references shared by the tuner and acceptance tests."""
import numpy as np

from camal.analytic import Environment, LsmConfig, Policy, combined_cost


def filter_grid(env: Environment, step: float = 0.05) -> np.ndarray:
    top = (env.M - env.min_buffer) * 8.0 / env.N
    return np.arange(0.0, top + 1e-9, step) * env.N / 8.0


def exhaustive_opt(env: Environment, mix, policies=tuple(Policy)) -> tuple[float, LsmConfig]:
    """Cheapest analytic cost over every integer T and a 0.05 bits/key filter grid."""
    best = (np.inf, None)
    Ts = np.arange(2, env.T_lim + 1, dtype=float)[:, None]
    M_f = filter_grid(env)[None, :]
    for pol in policies:
        c = combined_cost(env, mix, pol, Ts, env.M - M_f, M_f)
        i, j = np.unravel_index(int(np.argmin(c)), c.shape)
        if c[i, j] < best[0]:
            best = (float(c[i, j]), LsmConfig(int(Ts[i, 0]), pol, env.M - M_f[0, j], M_f[0, j]))
    return best


def grid_search(env: Environment, mix, evaluator, calls_per_policy: int = 10, label: str = "io") -> LsmConfig:
    """Uniform grid with a fixed call budget: T on a log-spaced grid times two filter sizes."""
    n_T = max(1, calls_per_policy // 2)
    Ts = np.unique(np.round(np.geomspace(2, env.T_lim, n_T)).astype(int))
    bpk_top = (env.M - env.min_buffer) * 8.0 / env.N
    filters = [bpk * env.N / 8.0 for bpk in (bpk_top / 3, 2 * bpk_top / 3)]
    best = (np.inf, None)
    for pol in Policy:
        for T in Ts:
            for M_f in filters:
                cfg = LsmConfig(int(T), pol, env.M - M_f, M_f)
                y = evaluator(0, mix, cfg).label(label)
                if y < best[0]:
                    best = (y, cfg)
    return best[1]

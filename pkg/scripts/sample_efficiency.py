"""Decoupled tuning vs uniform grid search on the noise-free analytic oracle, same call budget."""
import sys
from pathlib import Path

from camal.analytic import MB, Environment, combined_cost
from camal.tuner import AnalyticEvaluator, TunerConfig, decoupled_al
from camal.workload import training_workloads

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from oracles import exhaustive_opt, grid_search  # noqa: E402


def main() -> None:
    env = Environment(N=1_000_000, E=1024, M=16 * MB, min_buffer=1 * MB)
    mixes = training_workloads()
    ev = AnalyticEvaluator(env)
    res = decoupled_al(mixes, env, TunerConfig(h=20, label_kind="io"), ev)
    print(f"decoupled tuning used {ev.calls} oracle calls for {len(mixes)} workloads")
    print(" id   opt      tuned    err      grid     err")
    for i, mix in enumerate(mixes):
        opt, _ = exhaustive_opt(env, mix)
        cost = lambda c: float(combined_cost(env, mix, c.policy, c.T, c.M_b, c.M_f))
        a = cost(res.configs[i])
        g = cost(grid_search(env, mix, AnalyticEvaluator(env), 10))
        print(f"{i:3d}  {opt:.4f}  {a:.4f}  {a / opt - 1:+.1e}  {g:.4f}  {g / opt - 1:+.1%}")


if __name__ == "__main__":
    main()

"""Tune the 15 training mixes on the engine and compare against the default config.

Writes the sample store, the fitted model and a per-workload comparison CSV.
"""
import argparse
import csv
import time
from pathlib import Path

from camal.analytic import MB, Environment, default_config
from camal.learner import save
from camal.tuner import EngineEvaluator, TunerConfig, decoupled_al
from camal.workload import training_workloads


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/engine_tuning")
    ap.add_argument("--model", choices=("poly", "trees"), default="poly")
    ap.add_argument("--tune-ops", type=int, default=20_000)
    ap.add_argument("--measure-ops", type=int, default=50_000)
    ap.add_argument("--no-trust-region", action="store_true")
    args = ap.parse_args()

    env = Environment(N=100_000, E=64, M=0.25 * MB, min_buffer=8 / 1024 * MB)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    tcfg = TunerConfig(label_kind="io", model_kind=args.model, trust_region=not args.no_trust_region)
    res = decoupled_al(training_workloads(), env, tcfg, EngineEvaluator(env, ops=args.tune_ops))
    res.store.to_csv(out / "samples.csv")
    save(res.model, out / f"{args.model}.txt")
    print(f"tuned in {time.perf_counter() - t0:.0f} s with {len(res.store)} engine samples")

    meas = EngineEvaluator(env, ops=args.measure_ops)
    base = default_config(env)
    le = lt = 0
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["workload_id", "policy", "T", "bits_per_key", "cache_share", "tuned_io", "default_io"])
        for i, mix in enumerate(training_workloads()):
            cfg = res.configs[i]
            a = meas(i, mix, cfg, 7).io_per_op
            b = meas(i, mix, base, 7).io_per_op
            le += a <= b
            lt += a < b
            w.writerow([i, cfg.policy.value, cfg.T, f"{cfg.bits_per_key(env.N):.2f}", f"{cfg.M_c / env.M:.2f}",
                        f"{a:.4f}", f"{b:.4f}"])
            print(f"{i:2d} {cfg.policy.value:8s} T={cfg.T:<4d} tuned {a:.4f} default {b:.4f}")
    print(f"tuned <= default on {le}/15, strictly lower on {lt}/15")


if __name__ == "__main__":
    main()

"""Replay the 24 shifting test mixes with online retargeting against static baselines."""
import argparse

from camal.analytic import MB, Environment, default_config
from camal.dynamic import DetectorConfig, Retargeter, dynamic_experiment
from camal.learner import load
from camal.workload import test_workloads


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("model", help="model file, e.g. from scripts/engine_tuning.py")
    ap.add_argument("--ops-per-phase", type=int, default=5_000)
    ap.add_argument("--period", type=int, default=1_000)
    ap.add_argument("--tau", type=float, default=0.10)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--raise-T", action="store_true", help="let retargeting raise the size ratio")
    args = ap.parse_args()

    env = Environment(N=100_000, E=64, M=0.25 * MB, min_buffer=8 / 1024 * MB)
    model = load(args.model)
    rt = Retargeter(model, env, raise_T=args.raise_T)
    for seed in args.seeds:
        rep = dynamic_experiment(env, test_workloads(), DetectorConfig(args.period, args.tau), model, env,
                                 default_config(env), args.ops_per_phase, seed=seed, retargeter=rt)
        verdict = "<=" if rep.dynamic.total_io <= rep.baseline.total_io else ">"
        print(f"seed {seed}: dynamic {rep.dynamic.total_io} {verdict} static default {rep.baseline.total_io}; "
              f"no-retarget control {rep.control.total_io}; transition {rep.transition_io} "
              f"({100 * rep.transition_share:.1f}%); {len(rep.dynamic.events)} reconfigurations")


if __name__ == "__main__":
    main()

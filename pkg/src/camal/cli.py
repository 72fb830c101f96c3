"""``camal`` command line: workloads, sampling, training, tuning, benchmarking, dynamic runs."""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from .analytic import (MB, Environment, LsmConfig, Policy, best_analytic_config, combined_cost,
                       default_config, extrapolate)
from .dynamic import DetectorConfig, dynamic_experiment, write_event_log
from .engine.storage import StorageError
from .engine.tree import ConfigError
from .learner import load as load_model
from .engine.bloom import LN2_SQ
from .learner import LEVEL_MODES, fit, save as save_model
from .samples import SampleStore
from .tuner import EngineEvaluator, TunerConfig, decoupled_al, model_argmin, predicted_cost
from .workload import read_workload_file, test_workloads, training_workloads, write_workload_file

log = logging.getLogger("camal")

PROFILES = {
    "test": dict(n=100_000, entry_bytes=64, mem_mb=0.25, min_buffer_mb=8 / 1024, ops=50_000, period=1_000),
    "paper": dict(n=10_000_000, entry_bytes=1024, mem_mb=16.0, min_buffer_mb=1.0, ops=500_000, period=10_000),
}

REPORT_COLUMNS = ("workload_id", "kind", "v", "r", "q", "w", "s", "policy", "T", "Mb_bytes", "Mf_bytes",
                  "Mc_bytes", "predicted_cost", "analytic_cost")
BENCH_COLUMNS = ("workload_id", "kind", "policy", "T", "Mb_bytes", "Mf_bytes", "Mc_bytes", "ops",
                 "mean_latency_ns", "p90_latency_ns", "io_per_op", "blocks_read", "blocks_written", "error")
PHASE_COLUMNS = ("phase", "run", "v", "r", "q", "w", "policy", "T", "Mb_bytes", "Mf_bytes", "Mc_bytes",
                 "ops", "mean_latency_ns", "p90_latency_ns", "io_per_op", "phase_io", "filler_io",
                 "compaction_io")


# -- helpers -------------------------------------------------------------------

def default_seed() -> int:
    return int(os.environ.get("CAMAL_SEED", "0"))


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path: Path, command: str, args: argparse.Namespace, env: Environment | None,
                   inputs, outputs, extra: dict | None = None, started: str = "") -> None:
    """JSON record of one invocation: arguments, environment, inputs and outputs with checksums."""
    data = {
        "command": command,
        "arguments": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
                      if k != "func"},
        "environment": None if env is None else asdict(env),
        "seed": args.seed,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs if p is not None and Path(p).is_file()},
        "outputs": {str(p): _sha256(Path(p)) for p in outputs},
        "started": started,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    if extra:
        data.update(extra)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=str) + "\n")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def env_from_args(args) -> Environment:
    prof = PROFILES[args.profile]
    n = args.n if args.n is not None else prof["n"]
    e = args.entry_bytes if args.entry_bytes is not None else prof["entry_bytes"]
    m = args.mem_mb if args.mem_mb is not None else prof["mem_mb"]
    mb = args.min_buffer_mb if args.min_buffer_mb is not None else prof["min_buffer_mb"]
    return Environment(N=int(n), E=int(e), M=m * MB, min_buffer=mb * MB)


def tuner_from_args(args) -> TunerConfig:
    return TunerConfig(h=args.budget, samples_per_stage=args.samples_per_stage, label_kind=args.label,
                       model_kind=args.model, seed=args.seed)


def _ops(args) -> int:
    return args.ops if args.ops is not None else PROFILES[args.profile]["ops"]


def _workloads(args):
    if args.workloads is None:
        return training_workloads()
    return read_workload_file(args.workloads)


def _train_env(env: Environment, k: float) -> Environment:
    if k == 1:
        return env
    return Environment(N=max(1, int(round(env.N / k))), E=env.E, B=env.B, M=env.M / k,
                       min_buffer=env.min_buffer / k)


# -- commands ------------------------------------------------------------------

def cmd_workloads(args) -> list[Path]:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    if args.only in (None, "train"):
        files.append(out / "train.workloads")
        write_workload_file(files[-1], training_workloads())
    if args.only in (None, "test"):
        files.append(out / "test.workloads")
        write_workload_file(files[-1], test_workloads())
    for f in files:
        print(f"wrote {f}")
    return files


def _run_tuner(args, env):
    small = _train_env(env, args.k)
    ev = EngineEvaluator(small, ops=args.tune_ops)
    res = decoupled_al(_workloads(args), small, tuner_from_args(args), ev)
    return small, res


def cmd_sample(args) -> list[Path]:
    env = env_from_args(args)
    small, res = _run_tuner(args, env)
    out = Path(args.out)
    res.store.to_csv(out)
    print(f"collected {len(res.store)} samples at N={small.N}, M={small.M:.0f} B -> {out}")
    return [out]


def cmd_train(args) -> list[Path]:
    store = SampleStore.from_csv(args.samples)
    samples = store.samples
    if args.model == "poly":
        model = fit("poly", samples, label=args.label, strict=False, fp_exponent=args.fp_exponent,
                    level_mode=args.levels, seed=args.seed)
    else:
        model = fit("trees", samples, label=args.label, seed=args.seed)
    out = Path(args.out)
    save_model(model, out)
    print(f"trained {args.model} on {len(samples)} samples ({args.label}) -> {out}")
    return [out]


def _report_rows(env, mixes, configs):
    rows = []
    for wid, mix in enumerate(mixes):
        for kind, cfg in (("tuned", configs[wid]), ("default", default_config(env))):
            rows.append({
                "workload_id": wid, "kind": kind, "v": mix.v, "r": mix.r, "q": mix.q, "w": mix.w, "s": mix.s,
                "policy": cfg.policy.value, "T": cfg.T, "Mb_bytes": repr(float(cfg.M_b)),
                "Mf_bytes": repr(float(cfg.M_f)), "Mc_bytes": repr(float(cfg.M_c)),
                "predicted_cost": "",
                "analytic_cost": repr(float(combined_cost(env, mix, cfg.policy, cfg.T, cfg.M_b, cfg.M_f))),
            })
    return rows


def cmd_tune(args) -> list[Path]:
    env = env_from_args(args)
    mixes = _workloads(args)
    small = _train_env(env, args.k)
    model = None
    written = []
    if args.model_file is not None:
        model = load_model(args.model_file)
        configs = {}
        for wid, mix in enumerate(mixes):
            configs[wid] = model_argmin(model, small, [mix])
    elif args.budget == 0:
        configs = {wid: best_analytic_config(small, mix) for wid, mix in enumerate(mixes)}
    else:
        if args.budget < 2 * args.samples_per_stage:
            log.warning("budget %d is below one stage per policy; unfixed parameters fall back to analytic values",
                        args.budget)
        ev = EngineEvaluator(small, ops=args.tune_ops)
        res = decoupled_al(mixes, small, tuner_from_args(args), ev)
        configs, model = res.configs, res.model
        if args.samples_out:
            res.store.to_csv(args.samples_out)
            written.append(Path(args.samples_out))
    if args.k != 1:
        configs = {w: extrapolate(c, args.k) for w, c in configs.items()}
        configs = {w: LsmConfig(c.T, c.policy, env.M - c.M_f - c.M_c, c.M_f, c.M_c).validate(env)
                   for w, c in configs.items()}
        print(f"trained at scale N={small.N}, M={small.M:.0f} B (1/{args.k:g}); configs extrapolated to "
              f"N={env.N}, M={env.M:.0f} B")
    # predictions are made at the training scale the model saw
    rows = _report_rows(env, mixes, configs)
    if model is not None:
        for row in rows:
            wid = row["workload_id"]
            cfg = configs[wid] if row["kind"] == "tuned" else default_config(env)
            row["predicted_cost"] = repr(predicted_cost(model, small, [mixes[wid]], extrapolate(cfg, 1 / args.k)))
    out = Path(args.out)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for row in rows:
        print(f"{row['workload_id']:>3} {row['kind']:<7} {row['policy']:<8} T={row['T']:<4} "
              f"Mb={float(row['Mb_bytes']):>12.0f} Mf={float(row['Mf_bytes']):>12.0f} "
              f"Mc={float(row['Mc_bytes']):>10.0f} analytic={float(row['analytic_cost']):.4f}")
    return [out] + written


def read_report(path) -> list[tuple[int, str, LsmConfig]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise ValueError(f"{path}: unexpected report columns")
        return [(int(r["workload_id"]), r["kind"],
                 LsmConfig(int(r["T"]), Policy(r["policy"]), float(r["Mb_bytes"]), float(r["Mf_bytes"]),
                           float(r["Mc_bytes"]))) for r in reader]


def cmd_bench(args) -> list[Path]:
    env = env_from_args(args)
    mixes = _workloads(args)
    entries = read_report(args.report) if mixes else []
    ev = EngineEvaluator(env, ops=_ops(args))
    out = Path(args.out)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS, lineterminator="\n")
        w.writeheader()
        for wid, kind, cfg in entries:
            if wid >= len(mixes):
                continue
            row = {"workload_id": wid, "kind": kind, "policy": cfg.policy.value, "T": cfg.T,
                   "Mb_bytes": repr(cfg.M_b), "Mf_bytes": repr(cfg.M_f), "Mc_bytes": repr(cfg.M_c), "error": ""}
            try:
                s = ev(wid, mixes[wid], cfg, args.seed)
                row.update(ops=s.ops, mean_latency_ns=repr(s.mean_latency_ns), p90_latency_ns=repr(s.p90_latency_ns),
                           io_per_op=repr(s.io_per_op), blocks_read=s.blocks_read, blocks_written=s.blocks_written)
            except (ValueError, OSError) as exc:
                row["error"] = str(exc)
            w.writerow(row)
            fh.flush()
            print(f"{wid:>3} {kind:<7} io/op={row.get('io_per_op', 'n/a')}")
    return [out]


def cmd_dynamic(args) -> list[Path]:
    env = env_from_args(args)
    model = load_model(args.model_file)
    train_env = _train_env(env, args.k)
    period = args.period if args.period is not None else PROFILES[args.profile]["period"]
    det = DetectorConfig(p=period, tau=args.tau)
    mixes = read_workload_file(args.workloads) if args.workloads else test_workloads()
    rep = dynamic_experiment(env, mixes, det, model, train_env, default_config(env),
                             ops_per_phase=args.ops_per_phase or 5 * period, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    phases, events = out / "phases.csv", out / "events.csv"
    with open(phases, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=PHASE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for name, run in (("dynamic", rep.dynamic), ("control", rep.control), ("baseline", rep.baseline)):
            for p in run.phases:
                s, c = p.sample, p.sample.config
                w.writerow({"phase": p.phase, "run": name, "v": p.mix.v, "r": p.mix.r, "q": p.mix.q, "w": p.mix.w,
                            "policy": c.policy.value, "T": c.T, "Mb_bytes": repr(c.M_b), "Mf_bytes": repr(c.M_f),
                            "Mc_bytes": repr(c.M_c), "ops": s.ops, "mean_latency_ns": repr(s.mean_latency_ns),
                            "p90_latency_ns": repr(s.p90_latency_ns), "io_per_op": repr(s.io_per_op),
                            "phase_io": s.blocks_read + s.blocks_written, "filler_io": p.filler_io,
                            "compaction_io": p.compaction_io})
    write_event_log(events, rep.dynamic.events)
    print(f"{len(rep.dynamic.events)} reconfigurations; dynamic I/O {rep.dynamic.total_io}, "
          f"static default I/O {rep.baseline.total_io}, transition I/O {rep.transition_io} "
          f"({100 * rep.transition_share:.1f}%)")
    return [phases, events]


# -- parser --------------------------------------------------------------------

def _env_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--profile", choices=sorted(PROFILES), default="test")
    p.add_argument("--n", type=int, default=None, help="number of entries")
    p.add_argument("--entry-bytes", type=int, default=None)
    p.add_argument("--mem-mb", type=float, default=None, help="total memory budget in MiB")
    p.add_argument("--min-buffer-mb", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)


def _tune_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--workloads", type=Path, default=None, help="workload file (default: training mixes)")
    p.add_argument("--budget", type=int, default=20, help="samples per workload, split over both policies")
    p.add_argument("--samples-per-stage", type=int, default=3)
    p.add_argument("--model", choices=("poly", "trees"), default="trees")
    p.add_argument("--label", choices=("latency", "p90", "io"), default="latency")
    p.add_argument("--k", type=float, default=1.0, help="extrapolation factor; tune at N/k, M/k")
    p.add_argument("--tune-ops", type=int, default=20_000, help="measured operations per sample")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="camal", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("workloads", help="write the training and test workload files")
    p.add_argument("--out", type=Path, default=Path("."))
    p.add_argument("--only", choices=("train", "test"), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_workloads)

    p = sub.add_parser("sample", help="collect engine samples with decoupled active learning")
    _env_flags(p)
    _tune_flags(p)
    p.add_argument("--out", type=Path, default=Path("samples.csv"))
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="fit a cost model on a sample CSV")
    p.add_argument("--samples", type=Path, required=True)
    p.add_argument("--model", choices=("poly", "trees"), default="trees")
    p.add_argument("--label", choices=("latency", "p90", "io"), default="latency")
    p.add_argument("--fp-exponent", type=float, default=LN2_SQ,
                   help="filter term exponent scale for poly (default ln(2)^2, the Bloom law; 1 is the analytic form)")
    p.add_argument("--levels", choices=LEVEL_MODES, default="relaxed",
                   help="level-count feature for poly: relaxed logarithm, clamped at one level, or integer levels")
    p.add_argument("--out", type=Path, default=Path("model.txt"))
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tune", help="tune every workload and write a config report")
    _env_flags(p)
    _tune_flags(p)
    p.add_argument("--model-file", type=Path, default=None, help="use a trained model instead of sampling")
    p.add_argument("--samples-out", type=Path, default=None)
    p.add_argument("--out", type=Path, default=Path("tuned.csv"))
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("bench", help="measure report configs on the engine")
    _env_flags(p)
    p.add_argument("--report", type=Path, required=True)
    p.add_argument("--workloads", type=Path, default=None)
    p.add_argument("--ops", type=int, default=None)
    p.add_argument("--out", type=Path, default=Path("bench.csv"))
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("dynamic", help="replay the shifting test workloads with online retuning")
    _env_flags(p)
    p.add_argument("--model-file", type=Path, required=True)
    p.add_argument("--k", type=float, default=1.0, help="scale factor between model training and live data")
    p.add_argument("--workloads", type=Path, default=None, help="phase workloads (default: test mixes)")
    p.add_argument("--tau", type=float, default=0.10)
    p.add_argument("--period", type=int, default=None)
    p.add_argument("--ops-per-phase", type=int, default=None)
    p.add_argument("--out", type=Path, default=Path("dynamic"))
    p.set_defaults(func=cmd_dynamic)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "seed", None) is None:
        args.seed = default_seed()
    started = _now()
    try:
        outputs = args.func(args)
        env = env_from_args(args) if hasattr(args, "profile") else None
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (StorageError, OSError) as exc:
        print(f"engine failure: {exc}", file=sys.stderr)
        return 3
    inputs = [getattr(args, k, None) for k in ("workloads", "samples", "report", "model_file")]
    manifest = Path(str(outputs[0]) + ".manifest.json") if outputs else None
    if outputs and Path(outputs[0]).is_dir():
        manifest = Path(outputs[0]) / "MANIFEST.json"
    if manifest is not None:
        write_manifest(manifest, args.command, args, env, inputs, outputs, started=started)
    return 0


if __name__ == "__main__":
    sys.exit(main())

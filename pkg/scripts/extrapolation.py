"""Re-optimize the calibrated cost at (kN, kM) and compare with the scaled small-scale optimum."""
from camal.analytic import MB, Environment, calibrated_opt
from camal.workload import training_workloads


def main() -> None:
    env = Environment(N=1_000_000, E=1024, M=16 * MB, min_buffer=1 * MB)
    for i, mix in enumerate(training_workloads()):
        base = calibrated_opt(env, mix)
        cells = []
        for k in (2, 10):
            big = calibrated_opt(env.scaled(k), mix)
            ratio = big.M_f / (k * base.M_f) if base.M_f else float("nan")
            cells.append(f"k={k}: T {big.T} M_f/(k M_f') {ratio:.3f}")
        print(f"{i:2d} T'={base.T}  " + "  ".join(cells))


if __name__ == "__main__":
    main()

"""Time the compiled and pure-Python simulation kernels on the same replications.

    python3 benchmarks/bench_kernels.py --N 100 --horizon 2000

Both backends must produce identical sojourn sums; the script exits nonzero otherwise.
"""
import argparse
import sys
import time

from hetlb.core import ClusterSpec
from hetlb.simulator import BACKEND, SimConfig, run_replication


def time_one(cfg: SimConfig, backend: str, repeat: int) -> tuple[float, float, int]:
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        rep = run_replication(cfg, 0, backend=backend)
        best = min(best, time.perf_counter() - t)
    return best, rep.raw["sojourn_sum"], rep.raw["arrivals"]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--N", type=int, default=100)
    ap.add_argument("--lam", type=float, default=0.9)
    ap.add_argument("--horizon", type=float, default=2000.0)
    ap.add_argument("--repeat", type=int, default=3, help="best of this many runs")
    args = ap.parse_args(argv)
    if BACKEND != "compiled":
        print("compiled kernel not available; build it with `python3 setup.py build_ext --inplace`", file=sys.stderr)
        return 1

    spec = ClusterSpec((0.5, 0.5), (2 / 3, 4 / 3), (2, 2), args.lam)
    cases = [
        ("scheme1", None, "exponential"),
        ("scheme2", None, "exponential"),
        ("hybrid_sqd", (1 / 3, 2 / 3), "exponential"),
        ("scheme1", None, "power_law"),
        ("scheme2", None, "constant"),
    ]
    print(f"N={args.N} lambda={args.lam} horizon={args.horizon:g}, best of {args.repeat}")
    print(f"{'scheme':<12} {'sizes':<12} {'engine':<9} {'arrivals':>9} {'compiled s':>11} {'python s':>9} {'speedup':>8}")
    mismatch = False
    for scheme, p, dist in cases:
        cfg = SimConfig(spec, args.N, scheme=scheme, routing_probs=p, horizon=args.horizon, job_dist=dist)
        tc, sc, n = time_one(cfg, "compiled", args.repeat)
        tp, sp, _ = time_one(cfg, "python", 1)
        mismatch |= sc != sp
        print(f"{scheme:<12} {dist:<12} {cfg.engine_used:<9} {n:>9d} {tc:>11.4f} {tp:>9.3f} {tp / tc:>7.1f}x" + ("  MISMATCH" if sc != sp else ""))
    return 1 if mismatch else 0


if __name__ == "__main__":
    sys.exit(main())

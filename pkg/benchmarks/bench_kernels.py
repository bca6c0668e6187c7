"""Compare the compiled kernels against the numpy fallback.

Times the two hot loops in isolation (car-following speed update,
histogram accumulation) and one full simulated hour on the bundled grid,
then cross-checks that both backends produce bitwise-identical output.

Run from the repository root:

    python benchmarks/bench_kernels.py
    python benchmarks/bench_kernels.py --sizes 1000,10000 --repeat 50
"""
import argparse
import time

import numpy as np

from trafficlab import kernels
from trafficlab.demand import FlowModelParams, spawn_schedule
from trafficlab.microsim import SimConfig, run
from trafficlab.netgen import bundled_path
from trafficlab.roadnet import SensorPlacement, load_network


def time_call(fn, repeat: int) -> float:
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def follow_speed_args(n: int, rng):
    """A plausible mixed queue: 80% followers, heads with finite headroom."""
    pos = np.sort(rng.uniform(0.0, 5000.0, n))[::-1].copy()
    speed = rng.uniform(0.0, 14.0, n)
    leader = np.arange(-1, n - 1, dtype=np.int32)
    leader[rng.random(n) < 0.2] = -1
    head_free = rng.uniform(0.0, 200.0, n)
    head_lead = rng.uniform(0.0, 14.0, n)
    limit = np.full(n, 14.0)
    cap = np.where(rng.random(n) < 0.1, 3.0, np.inf)
    noise = rng.uniform(0.0, 0.26, n)
    return (pos, speed, leader, head_free, head_lead, limit, cap, noise,
            2.6, 4.5, 2.5, 5.0, 1.0)


def bench_follow(sizes, repeat: int):
    print("car-following speed update (best of %d)" % repeat)
    print(f"{'n':>8} {'python':>12} {'compiled':>12} {'speedup':>8}")
    for n in sizes:
        args = follow_speed_args(n, np.random.default_rng(n))
        out_py = np.empty(n)
        out_c = np.empty(n)
        t_py = time_call(
            lambda: kernels.follow_speeds(*args, out_py, backend="python"),
            repeat)
        t_c = time_call(
            lambda: kernels.follow_speeds(*args, out_c, backend="compiled"),
            repeat)
        assert np.array_equal(out_py, out_c), "backends disagree"
        print(f"{n:>8} {t_py * 1e6:>10.1f}us {t_c * 1e6:>10.1f}us "
              f"{t_py / t_c:>7.1f}x")


def bench_hist(sizes, repeat: int):
    print("histogram accumulation, 20 features x 64 bins "
          "(best of %d)" % repeat)
    print(f"{'rows':>8} {'python':>12} {'compiled':>12} {'speedup':>8}")
    for n in sizes:
        rng = np.random.default_rng(n)
        codes = rng.integers(0, 64, (n, 20), dtype=np.uint8)
        rows = np.nonzero(rng.random(n) < 0.8)[0].astype(np.int32)
        grad = rng.normal(0.0, 1.0, n)
        hess = rng.uniform(0.1, 1.0, n)
        shapes = (20, 64)

        def zeros():
            return (np.zeros(shapes), np.zeros(shapes), np.zeros(shapes))

        acc_py = zeros()
        acc_c = zeros()
        t_py = time_call(
            lambda: kernels.hist_build(codes, rows, grad, hess,
                                       *zeros(), backend="python"), repeat)
        t_c = time_call(
            lambda: kernels.hist_build(codes, rows, grad, hess,
                                       *zeros(), backend="compiled"), repeat)
        kernels.hist_build(codes, rows, grad, hess, *acc_py,
                           backend="python")
        kernels.hist_build(codes, rows, grad, hess, *acc_c,
                           backend="compiled")
        for a, b in zip(acc_py, acc_c):
            assert np.allclose(a, b, rtol=0, atol=1e-9), "backends disagree"
        print(f"{n:>8} {t_py * 1e6:>10.1f}us {t_c * 1e6:>10.1f}us "
              f"{t_py / t_c:>7.1f}x")


def bench_simulation():
    print("one simulated hour, 4x4 grid, ~700 vehicles")
    net = load_network(str(bundled_path("grid4x4.net")))
    sites = sorted(n.id for n in net.nodes.values() if n.sensor_site)
    placement = SensorPlacement(tuple(sites), 50.0)
    params = FlowModelParams(0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 175.0)
    sched = spawn_schedule(params, net, 3600.0, seed=1, bin_duration=900.0)
    results = {}
    for engine in ("python", "compiled"):
        t0 = time.perf_counter()
        results[engine] = run(net, sched, placement=placement,
                              cfg=SimConfig(seed=1, engine=engine))
        dt = time.perf_counter() - t0
        print(f"  {engine:>8}: {dt:.2f}s "
              f"(spawned={results[engine].spawned})")
    assert results["python"].raw.data_equal(results["compiled"].raw), \
        "backends disagree"
    print("  raw datasets bitwise identical across engines")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="1000,10000,100000",
                    help="comma-separated problem sizes")
    ap.add_argument("--repeat", type=int, default=30)
    ap.add_argument("--skip-sim", action="store_true")
    args = ap.parse_args()
    if not kernels.HAVE_NATIVE:
        raise SystemExit("extension not built; nothing to compare "
                         "(build it, then rerun)")
    sizes = [int(s) for s in args.sizes.split(",")]
    bench_follow(sizes, args.repeat)
    print()
    bench_hist(sizes, args.repeat)
    if not args.skip_sim:
        print()
        bench_simulation()


if __name__ == "__main__":
    main()

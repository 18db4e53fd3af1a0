"""Compiled vs pure-Python kernels.

Times ``mix`` on a fixed amount of work and measures how many trivial
operations each ``fixed_window`` loop completes in the same window (the
loop's own overhead is what bounds that count).

    python3 benchmarks/bench_kernels.py [--window 0.2] [--repeat 5]
"""

import argparse
import statistics
import time

from pqbench import _kernels_py

try:
    from pqbench import _kernels as _compiled
except ImportError:
    _compiled = None


def time_mix(impl, units: int, repeat: int) -> float:
    best = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        impl.mix(1, units)
        best.append(time.perf_counter() - t0)
    return min(best)


def window_rate(impl, window: float, repeat: int) -> float:
    rates = []
    for _ in range(repeat):
        n, elapsed_ns, _ = impl.fixed_window(lambda: None, window, impl.read_cycles)
        rates.append(n / (elapsed_ns / 1e9))
    return statistics.median(rates)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--window", type=float, default=0.2, help="seconds per fixed_window call")
    ap.add_argument("--units", type=int, default=200_000, help="mix() work units")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    impls = [("pure-python", _kernels_py)]
    if _compiled is None:
        print("compiled kernels not built; showing the fallback only")
    else:
        impls.insert(0, ("compiled", _compiled))
    assert _compiled is None or _compiled.mix(1, 1000) == _kernels_py.mix(1, 1000)

    print(f"{'kernel':<12} {'mix (ms)':>10} {'window ops/s':>14}")
    results = {}
    for name, impl in impls:
        results[name] = (time_mix(impl, args.units, args.repeat) * 1e3, window_rate(impl, args.window, args.repeat))
        print(f"{name:<12} {results[name][0]:>10.2f} {results[name][1]:>14,.0f}")
    if len(results) == 2:
        (cm, cw), (pm, pw) = results["compiled"], results["pure-python"]
        print(f"speedup: mix x{pm / cm:.1f}, window loop x{cw / pw:.1f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

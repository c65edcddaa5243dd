"""Time the numba and numpy kernel backends on simulation-sized inputs.

    python benchmarks/bench_kernels.py [--n 2000] [--D 100] [--repeat 50]

Prints the median wall time per call for each kernel and backend, plus the
largest absolute difference between the two backends' outputs.
"""

import argparse
import statistics
import time

import numpy as np

from calfusion import kernels


def _time(fn, args, repeat):
    fn(*args)  # compile / warm up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def _maxdiff(a, b):
    if isinstance(a, tuple):
        return max(_maxdiff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--D", type=int, default=100)
    ap.add_argument("--q", type=int, default=9, help="constraint columns")
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args(argv)

    if kernels.numba_backend is None:
        print("numba is not installed; only the numpy backend is available")
        return 1
    rng = np.random.default_rng(0)
    h = rng.standard_normal((args.n, args.q))
    h -= h.mean(axis=0)
    rho = 0.05 * rng.standard_normal(args.q)
    base = rng.standard_normal(args.n)
    draws = rng.standard_normal((args.n, args.D, 1))
    theta_w = np.array([0.7])

    cases = [
        ("el_objective", (h, rho)),
        ("el_terms", (h, rho)),
        ("link_draw_moments[identity]", (base, draws, theta_w, kernels.IDENTITY)),
        ("link_draw_moments[logistic]", (base, draws, theta_w, kernels.LOGISTIC)),
    ]
    print(f"n={args.n} D={args.D} q={args.q} repeat={args.repeat}")
    print(f"{'kernel':<30}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}{'max diff':>11}")
    for name, call_args in cases:
        attr = name.split("[")[0]
        f_np = getattr(kernels.numpy_backend, attr)
        f_nb = getattr(kernels.numba_backend, attr)
        t_np = _time(f_np, call_args, args.repeat)
        t_nb = _time(f_nb, call_args, args.repeat)
        diff = _maxdiff(f_np(*call_args), f_nb(*call_args))
        print(f"{name:<30}{1e3 * t_np:>10.3f}{1e3 * t_nb:>10.3f}{t_np / t_nb:>9.2f}{diff:>11.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

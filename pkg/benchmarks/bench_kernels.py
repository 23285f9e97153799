"""Time the compiled kernel core against the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--repeat N]

Prints one row per kernel with the median wall time of each backend and the
speedup. Exits with a message if the extension is not built.
"""

import argparse
import statistics
import time

import numpy as np

from seqbo import _pykernels

try:
    from seqbo import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def _time(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if _ckernels is None:
        raise SystemExit("compiled extension not available; run `pip install -e . --no-build-isolation`")

    rng = np.random.default_rng(0)
    n, m, length, k = 500, 500, 240, 22
    A = rng.integers(0, k, size=(n, length)).astype(np.intp)
    B = rng.integers(0, k, size=(m, length)).astype(np.intp)
    G = rng.standard_normal((k, k))
    G = np.ascontiguousarray(G @ G.T)
    X = rng.standard_normal((n, 256))
    Y = rng.standard_normal((m, 256))

    cases = [
        ("coded_dot", (A, B, G)),
        ("coded_sqnorm", (A, G)),
        ("sqdist", (X, Y)),
    ]
    print(f"{'kernel':<14}{'numpy (ms)':>12}{'cython (ms)':>13}{'speedup':>9}")
    for name, call_args in cases:
        ref = getattr(_pykernels, name)(*call_args)
        got = getattr(_ckernels, name)(*call_args)
        np.testing.assert_allclose(np.asarray(got), ref, rtol=1e-10, atol=1e-8)
        t_py = _time(getattr(_pykernels, name), call_args, args.repeat)
        t_c = _time(getattr(_ckernels, name), call_args, args.repeat)
        print(f"{name:<14}{t_py * 1e3:>12.2f}{t_c * 1e3:>13.2f}{t_py / t_c:>8.1f}x")


if __name__ == "__main__":
    main()

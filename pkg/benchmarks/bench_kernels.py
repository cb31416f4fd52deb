"""Compare the compiled and numpy softmax cross-entropy kernels.

Usage::

    python benchmarks/bench_kernels.py [--repeat 200] [--out timings.csv]

Each kernel is timed on the toy-table shapes (about 1000 rows, 2-3
features, 2 classes) and on a wider batch. Both backends are also checked
for agreement before timing.
"""
import argparse
import csv
import sys
import timeit

import numpy as np

from domainshift import _pykernels

try:
    from domainshift import _ckernels
except ImportError:
    _ckernels = None

SHAPES = ((1000, 2, 2), (1000, 3, 2), (10000, 16, 5))


def _inputs(n, m, C, seed=0):
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.normal(size=C * m + C), rng.normal(size=(n, m)), rng.integers(0, C, size=n).astype(np.int64)


def _calls(mod, theta, X, y, C):
    return {
        "softmax_xent": lambda: mod.softmax_xent(theta, X, y, C),
        "softmax_xent_input_grad": lambda: mod.softmax_xent_input_grad(theta, X, y, C),
        "softmax_probs": lambda: mod.softmax_probs(theta, X, C),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=200, help="calls per timing")
    parser.add_argument("--out", help="optional CSV of timings")
    args = parser.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 1

    rows = []
    print(f"{'kernel':<26}{'shape (n,m,C)':<18}{'python us':>12}{'cython us':>12}{'speedup':>10}")
    for n, m, C in SHAPES:
        theta, X, y = _inputs(n, m, C)
        py_calls = _calls(_pykernels, theta, X, y, C)
        c_calls = _calls(_ckernels, theta, X, y, C)
        for name in py_calls:
            a, b = py_calls[name](), c_calls[name]()
            for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
                np.testing.assert_allclose(np.asarray(v), np.asarray(u), rtol=1e-12, atol=1e-14)
            t_py = min(timeit.repeat(py_calls[name], number=args.repeat, repeat=3)) / args.repeat * 1e6
            t_c = min(timeit.repeat(c_calls[name], number=args.repeat, repeat=3)) / args.repeat * 1e6
            rows.append((name, n, m, C, t_py, t_c))
            print(f"{name:<26}{str((n, m, C)):<18}{t_py:>12.1f}{t_c:>12.1f}{t_py / t_c:>9.2f}x")
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["kernel", "n", "m", "classes", "python_us", "cython_us"])
            writer.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())

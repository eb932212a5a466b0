"""Compiled kernels against their NumPy fallbacks on desk-scale inputs.

    python3 benchmarks/bench_kernels.py [--repeat R] [--scale S]

Prints one row per kernel with the best-of-R wall time of each backend,
the speedup, and the maximum absolute difference between their outputs.
"""
import argparse
import time

import numpy as np

from slowfast import _kernels_py as py

try:
    from slowfast import _kernels as cy
except ImportError:  # pragma: no cover
    cy = None


def best_of(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cases(scale, rng):
    T, npath = int(2000 * scale), int(2000 * scale)
    P = np.eye(2) + 0.01 * rng.standard_normal((T, 2, 2))
    Q = 0.1 * rng.standard_normal((T, 2, 1))
    z0 = rng.standard_normal((npath, 2))
    dW = rng.standard_normal((npath, T, 1))
    yield "propagate_linear", (P, Q, z0, dW, 10)

    steps = int(13000 * scale)
    dWp = rng.standard_normal((npath, steps)) * np.sqrt(5e-5)
    rec = np.array([5000, 7500, 8750, 10000], dtype=np.int64)
    yield "pitchfork_paths", (np.zeros(npath), -0.5, 5e-5, 1e-3, 1e-3, dWp, rec, 0.1, 1e6)

    Tn = int(600 * scale)
    Pn = np.eye(2) + 0.01 * rng.standard_normal((Tn, 2, 2))
    yield "propagator_norms", (Pn,)

    N = py.propagator_norms(Pn)
    yield "chi_integrals", (np.linspace(0.0, 1.0, Tn + 1), N, 2, 1.0)

    q = rng.random((npath, T))
    yield "first_crossing", (q, 0.999)


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    finite = np.isfinite(a) & np.isfinite(b)
    return float(np.max(np.abs(a[finite] - b[finite]), initial=0.0))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--scale", type=float, default=1.0)
    args = ap.parse_args()
    if cy is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'cython [s]':>12}{'numpy [s]':>12}{'speedup':>10}{'max |diff|':>13}")
    for name, args_ in cases(args.scale, rng):
        tc, oc = best_of(lambda: getattr(cy, name)(*args_), args.repeat)
        tp, op = best_of(lambda: getattr(py, name)(*args_), args.repeat)
        print(f"{name:<18}{tc:>12.4f}{tp:>12.4f}{tp / tc:>10.1f}{max_diff(oc, op):>13.2e}")


if __name__ == "__main__":
    main()

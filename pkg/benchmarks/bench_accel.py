"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_accel.py [--repeats 20] [--cols 8]

Prints one row per kernel: mean seconds per call for each path, the speedup,
and the largest absolute difference between the two results.
"""
import argparse
import timeit

import numpy as np

from scoreapprox import _accel


def stencil_case(m, tau, cols, rng):
    # tau-fold 5-point Laplacian on an m x m grid, applied at interior points
    r = np.arange(-tau, tau + 1)
    di, dj = np.meshgrid(r, r, indexing="ij")
    keep = np.abs(di) + np.abs(dj) <= tau
    delta = (di[keep] * m + dj[keep]).astype(np.int64)
    w = rng.standard_normal(delta.size)
    ii, jj = np.meshgrid(np.arange(tau, m - tau), np.arange(tau, m - tau), indexing="ij")
    idx = (ii * m + jj).ravel().astype(np.int64)
    full = rng.standard_normal((m * m, cols))
    vals = rng.standard_normal((idx.size, cols))
    return (
        ("stencil_gather", lambda nb: _accel.stencil_gather(full, idx, delta, w, use_numba=nb)),
        ("stencil_scatter", lambda nb: _accel.stencil_scatter(vals, idx, delta, w, m * m, use_numba=nb)),
    )


def banded_case(n, depth, cols, rng):
    diag = rng.uniform(1, 2, n)
    coef = rng.standard_normal((n, depth)) / depth
    y = rng.standard_normal((n, cols))
    return (
        ("banded_lower", lambda nb: _accel.banded_lower(diag, coef, y, use_numba=nb)),
        ("banded_lower_t", lambda nb: _accel.banded_lower_t(diag, coef, y, use_numba=nb)),
    )


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", type=int, default=256, help="grid side for the stencil kernels")
    ap.add_argument("--tau", type=int, default=2)
    ap.add_argument("--n", type=int, default=6000, help="rows for the banded kernels")
    ap.add_argument("--depth", type=int, default=20)
    ap.add_argument("--cols", type=int, default=8)
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args(argv)

    if not _accel._HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    cases = stencil_case(args.grid, args.tau, args.cols, rng) + banded_case(
        args.n, args.depth, args.cols, rng)
    print(f"{'kernel':<16}{'numpy s':>12}{'numba s':>12}{'speedup':>10}{'max diff':>12}")
    for name, fn in cases:
        diff = np.abs(fn(True) - fn(False)).max()  # also triggers compilation
        t_np = min(timeit.repeat(lambda: fn(False), number=1, repeat=args.repeats))
        t_nb = min(timeit.repeat(lambda: fn(True), number=1, repeat=args.repeats))
        print(f"{name:<16}{t_np:>12.2e}{t_nb:>12.2e}{t_np / t_nb:>10.1f}{diff:>12.1e}")


if __name__ == "__main__":
    main()

"""Inner loops with a numba path and a pure-numpy path.

The numba path is used when numba imports and ``SCOREAPPROX_NUMBA`` is not
set to ``0``.  Both paths compute the same thing; ``benchmarks/bench_accel.py``
times them against each other and the test suite checks they agree.
"""
import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False


def numba_enabled():
    return _HAVE_NUMBA and os.environ.get("SCOREAPPROX_NUMBA", "1") != "0"


# ---------------------------------------------------------------------------
# stencil gather / scatter on flattened grids
#
# out[k, c] = sum_o w[o] * full[idx[k] + delta[o], c]
# All stencil points of a retained index lie inside the grid, so flat
# offsets never wrap.
# ---------------------------------------------------------------------------

def _stencil_gather_np(full, idx, delta, w):
    return np.tensordot(w, full[idx[None, :] + delta[:, None]], axes=(0, 0))


def _stencil_scatter_np(vals, idx, delta, w, size):
    out = np.zeros((size, vals.shape[1]))
    for o in range(delta.shape[0]):
        out[idx + delta[o]] += w[o] * vals
    return out


if _HAVE_NUMBA:

    @njit(cache=True)
    def _stencil_gather_nb(full, idx, delta, w):
        n = idx.shape[0]
        s = full.shape[1]
        out = np.zeros((n, s))
        for k in range(n):
            base = idx[k]
            for o in range(delta.shape[0]):
                row = base + delta[o]
                wo = w[o]
                for c in range(s):
                    out[k, c] += wo * full[row, c]
        return out

    @njit(cache=True)
    def _stencil_scatter_nb(vals, idx, delta, w, size):
        s = vals.shape[1]
        out = np.zeros((size, s))
        for k in range(idx.shape[0]):
            base = idx[k]
            for o in range(delta.shape[0]):
                row = base + delta[o]
                wo = w[o]
                for c in range(s):
                    out[row, c] += wo * vals[k, c]
        return out


def stencil_gather(full, idx, delta, w, use_numba=None):
    """Apply a stencil at the flat indices ``idx`` of a 2-D (points, cols) array."""
    full = np.ascontiguousarray(full, dtype=np.float64)
    use = numba_enabled() if use_numba is None else use_numba
    if use and _HAVE_NUMBA:
        return _stencil_gather_nb(full, idx, delta, w)
    return _stencil_gather_np(full, idx, delta, w)


def stencil_scatter(vals, idx, delta, w, size, use_numba=None):
    """Adjoint of :func:`stencil_gather`."""
    vals = np.ascontiguousarray(vals, dtype=np.float64)
    use = numba_enabled() if use_numba is None else use_numba
    if use and _HAVE_NUMBA:
        return _stencil_scatter_nb(vals, idx, delta, w, size)
    return _stencil_scatter_np(vals, idx, delta, w, size)


# ---------------------------------------------------------------------------
# banded lower-triangular products
#
# Row k of L has diag[k] on the diagonal and coef[k, j] in column
# k - depth + j for j = 0..depth-1 (entries with negative column are zero).
# ---------------------------------------------------------------------------

def _banded_lower_np(diag, coef, y):
    depth = coef.shape[1]
    z = diag[:, None] * y
    for j in range(depth):
        shift = depth - j
        if shift < y.shape[0]:
            z[shift:] += coef[shift:, j, None] * y[:-shift]
    return z


def _banded_lower_t_np(diag, coef, z):
    depth = coef.shape[1]
    y = diag[:, None] * z
    for j in range(depth):
        shift = depth - j
        if shift < z.shape[0]:
            y[:-shift] += coef[shift:, j, None] * z[shift:]
    return y


if _HAVE_NUMBA:

    @njit(cache=True)
    def _banded_lower_nb(diag, coef, y):
        n, s = y.shape
        depth = coef.shape[1]
        z = np.empty((n, s))
        for k in range(n):
            d = diag[k]
            for c in range(s):
                z[k, c] = d * y[k, c]
            for j in range(depth):
                col = k - depth + j
                if col >= 0:
                    a = coef[k, j]
                    for c in range(s):
                        z[k, c] += a * y[col, c]
        return z

    @njit(cache=True)
    def _banded_lower_t_nb(diag, coef, z):
        n, s = z.shape
        depth = coef.shape[1]
        y = np.empty((n, s))
        for k in range(n):
            d = diag[k]
            for c in range(s):
                y[k, c] = d * z[k, c]
        for k in range(n):
            for j in range(depth):
                col = k - depth + j
                if col >= 0:
                    a = coef[k, j]
                    for c in range(s):
                        y[col, c] += a * z[k, c]
        return y


def banded_lower(diag, coef, y, use_numba=None):
    y = np.ascontiguousarray(y, dtype=np.float64)
    use = numba_enabled() if use_numba is None else use_numba
    if use and _HAVE_NUMBA:
        return _banded_lower_nb(diag, coef, y)
    return _banded_lower_np(diag, coef, y)


def banded_lower_t(diag, coef, z, use_numba=None):
    z = np.ascontiguousarray(z, dtype=np.float64)
    use = numba_enabled() if use_numba is None else use_numba
    if use and _HAVE_NUMBA:
        return _banded_lower_t_nb(diag, coef, z)
    return _banded_lower_t_np(diag, coef, z)

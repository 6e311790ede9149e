"""Preconditioners for the covariance solves.

The main one is a banded approximate inverse Cholesky factor: in a chosen
ordering, row ``i`` holds the negated coefficients of the best linear
predictor of point ``i`` from its ``depth`` predecessors, scaled by the
inverse conditional standard deviation.  ``M = L'L`` then approximates
``K^-1``.
"""
import numpy as np
from scipy import linalg

from . import _accel
from .errors import NumericError, ShapeError

CHUNK = 4096


def pair_cov_dense(K):
    K = np.asarray(K, dtype=float)
    return lambda I, J: K[I, J]


def pair_cov_grid(model, grid, plan):
    """Elementwise covariance of retained grid points via the lag table."""
    from .operators import lag_table

    maxlag = tuple(m - 1 for m in grid.dims)
    table = lag_table(model, maxlag, grid.spacing, plan.tau, plan.stencil)[0]
    ij = grid.multi_index(plan.retained)
    off = np.asarray(maxlag)

    def cov(I, J):
        diff = ij[I] - ij[J] + off
        return table[tuple(np.moveaxis(diff, -1, 0))]

    return cov


def pair_cov_spacetime(model, stgrid):
    lat, lon, t = stgrid.sites()

    def cov(I, J):
        val, _ = model.value_and_grad(lat[I], lat[J], lon[I] - lon[J], t[I] - t[J])
        return val

    return cov


class IdentityPreconditioner:
    name = "none"

    def apply(self, x):
        return np.asarray(x, dtype=float)


class DensePreconditioner:
    """Explicit SPD matrix; mostly for tests (``M = K^-1`` gives one-step CG)."""

    name = "dense"

    def __init__(self, M):
        self.M = np.asarray(M, dtype=float)

    def apply(self, x):
        return self.M @ x


class BandedInverseCholesky:
    """``M = P' L' L P`` with ``L`` banded lower triangular of depth ``depth``."""

    name = "banded-ichol"

    def __init__(self, order, diag, coef):
        self.order = np.asarray(order, dtype=np.int64)
        self.diag = np.asarray(diag, dtype=float)
        self.coef = np.ascontiguousarray(coef, dtype=float)
        self.n = self.order.size
        self.depth = self.coef.shape[1]

    def factor_dense(self):
        """Dense ``L`` in the permuted ordering."""
        L = np.diag(self.diag)
        for k in range(self.n):
            for j in range(self.depth):
                col = k - self.depth + j
                if col >= 0:
                    L[k, col] = self.coef[k, j]
        return L

    def to_dense(self):
        L = self.factor_dense()
        M = np.empty((self.n, self.n))
        M[np.ix_(self.order, self.order)] = L.T @ L
        return M

    def apply(self, x, use_numba=None):
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.n:
            raise ShapeError(f"operand has {x.shape[0]} rows, preconditioner is {self.n}")
        vec = x.ndim == 1
        y = (x[:, None] if vec else x)[self.order]
        z = _accel.banded_lower(self.diag, self.coef, y, use_numba)
        w = _accel.banded_lower_t(self.diag, self.coef, z, use_numba)
        out = np.empty_like(w)
        out[self.order] = w
        return out[:, 0] if vec else out


def _local_rows(cov, order, rows, depth):
    """Batched predictor coefficients for rows with a full window of predecessors."""
    win = rows[:, None] + np.arange(-depth, 1)[None, :]
    sites = order[win]
    C = cov(sites[:, :, None], sites[:, None, :])
    A = C[:, :depth, :depth]
    try:
        chol = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        bad = []
        for r, Ak in zip(rows, A):
            try:
                np.linalg.cholesky(Ak)
            except np.linalg.LinAlgError:
                bad.append(int(r))
        raise NumericError(
            "singular local covariance for rows "
            + ", ".join(f"{r} (points {order[r - depth:r].tolist()})" for r in bad[:5])
        )
    rhs = C[:, :depth, depth]
    y = np.linalg.solve(chol, rhs[..., None])
    c = np.linalg.solve(np.swapaxes(chol, 1, 2), y)[..., 0]
    var = C[:, depth, depth] - np.einsum("kj,kj->k", rhs, c)
    return c, var


def build_banded_inverse_cholesky(cov, order, depth=20):
    """Banded inverse-Cholesky preconditioner.

    ``cov(I, J)`` must return the covariance of points ``I`` and ``J``
    elementwise (broadcasting index arrays); ``order`` is the conditioning
    order of the points.
    """
    depth = int(depth)
    if depth < 0:
        raise ValueError("depth must be nonnegative")
    order = np.asarray(order, dtype=np.int64)
    n = order.size
    depth_eff = min(depth, max(n - 1, 0))
    diag = np.empty(n)
    coef = np.zeros((n, depth_eff))
    var = np.empty(n)
    # leading rows have fewer predecessors
    for i in range(min(depth_eff, n)):
        if i == 0:
            var[0] = cov(order[:1], order[:1])[0]
            continue
        sites = order[:i + 1]
        C = cov(sites[:, None], sites[None, :])
        try:
            cf = linalg.cho_factor(C[:i, :i], lower=True)
        except linalg.LinAlgError:
            raise NumericError(f"singular local covariance for row {i} (points {order[:i].tolist()})")
        c = linalg.cho_solve(cf, C[:i, i])
        var[i] = C[i, i] - C[:i, i] @ c
        coef[i, depth_eff - i:] = -c
    for start in range(depth_eff, n, CHUNK):
        rows = np.arange(start, min(start + CHUNK, n))
        c, v = _local_rows(cov, order, rows, depth_eff)
        coef[rows] = -c
        var[rows] = v
    bad = np.flatnonzero(~(var > 0))
    if bad.size:
        raise NumericError(
            f"nonpositive conditional variance at ordered rows {bad[:5].tolist()} "
            f"(points {order[bad[:5]].tolist()})"
        )
    sd_inv = 1.0 / np.sqrt(var)
    return BandedInverseCholesky(order, sd_inv, coef * sd_inv[:, None])


def spacetime_order(stgrid):
    """Observations are already stored by time, then latitude."""
    return np.arange(stgrid.n)


def build_preconditioner(kind, model=None, grid=None, plan=None, depth=20, order=None):
    """Factory used by the command line and the fit driver.

    ``kind`` is ``none``, ``laplacian-filter`` (the filtering lives in the
    data transform, so no extra operator is applied) or ``banded-ichol``.
    """
    if kind in (None, "none", "laplacian-filter"):
        return None
    if kind != "banded-ichol":
        raise ValueError(f"unknown preconditioner {kind!r}")
    from .gridfilter import zigzag_order
    from .operators import SpaceTimeGrid

    if isinstance(grid, SpaceTimeGrid):
        cov = pair_cov_spacetime(model, grid)
        order = spacetime_order(grid) if order is None else order
    else:
        cov = pair_cov_grid(model, grid, plan)
        if order is None and grid.d == 2:
            # stripes about sqrt(depth) rows tall keep predecessors nearby
            order = zigzag_order(grid.multi_index(plan.retained), grid.dims[1], max(depth, 1))
        elif order is None:
            order = np.arange(plan.n_f)
    return build_banded_inverse_cholesky(cov, order, depth)

"""Matrix-free covariance operators and Gaussian-process simulation.

Every operator exposes ``matvec(x, which=None)`` where ``which`` is ``None``
for ``K`` or an integer ``i`` for ``dK/dtheta_i``, and ``x`` is a vector or
an ``(n, s)`` block.  The filtered power-law covariance is stationary on the
grid, so filtering is folded into the lag kernel and every backend works on
the retained points directly.
"""
import time
from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft
from scipy import linalg

from .errors import NumericError, ShapeError, SimulationError
from .gridfilter import OccludedGrid, build_filter_plan, build_disc_occluded_grid
from .kernels import PowerLawModel, SpaceTimeModel, is_even_alpha

NEG_TOL = 1e-8


def _shift_for(model, tau):
    if not isinstance(model, PowerLawModel) or tau == 0:
        return None
    alpha = model.params.alpha
    if is_even_alpha(alpha):
        return None
    k = int(round(alpha / 2))
    return k if 2 * k < 4 * tau else None


def _stencil_autocorr(stencil):
    # the Laplacian stencil is symmetric, so autocorrelation == self-convolution
    from scipy import signal

    return signal.convolve(stencil, stencil, method="direct")


def lag_table(model, maxlag, spacing, tau=0, stencil=None):
    """Kernel value and gradients on integer lags ``-maxlag..maxlag`` per axis.

    Returns an array of shape ``(1 + p, 2 maxlag_1 + 1, ...)``: index 0 is the
    value, index ``1 + i`` the derivative in ``theta_i``.  With ``tau > 0`` the
    table is that of the ``tau``-fold Laplacian-filtered process.
    """
    maxlag = tuple(int(m) for m in maxlag)
    d = len(maxlag)
    spacing = np.broadcast_to(np.asarray(spacing, dtype=float), (d,))
    ext = 2 * tau
    axes = [np.arange(-(m + ext), m + ext + 1) * spacing[k] for k, m in enumerate(maxlag)]
    lags = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    val, grads = model.lag_value_and_grad(lags, shift=_shift_for(model, tau))
    raw = np.concatenate([val[None], grads], axis=0)
    if tau == 0:
        return raw
    from .gridfilter import laplacian_stencil

    if stencil is None:
        stencil = laplacian_stencil(d, tau)
    C = _stencil_autocorr(stencil)
    out = np.zeros((raw.shape[0],) + tuple(2 * m + 1 for m in maxlag))
    for off in np.argwhere(C != 0):
        sl = (slice(None),) + tuple(
            slice(int(o), int(o) + 2 * m + 1) for o, m in zip(off, maxlag)
        )
        out += C[tuple(off)] * raw[sl]
    return out


class CovOperator:
    """Base class; subclasses provide ``_apply(X, whichs)``."""

    backend = "abstract"

    def __init__(self, n, model):
        self.n = int(n)
        self.model = model
        self.p = model.p
        self.theta = model.theta.copy()

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.n:
            raise ShapeError(f"operand has {x.shape[0]} rows, operator is {self.n}")
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite operand")
        return x

    def matvec(self, x, which=None):
        x = self._check(x)
        vec = x.ndim == 1
        X = x[:, None] if vec else x
        out = self._apply(X, [which])[0]
        return out[:, 0] if vec else out

    def derivative_matvecs(self, x):
        """``[K_1 x, ..., K_p x]`` as an array of shape ``(p,) + x.shape``."""
        x = self._check(x)
        vec = x.ndim == 1
        X = x[:, None] if vec else x
        out = np.stack(self._apply(X, list(range(self.p))))
        return out[..., 0] if vec else out

    def __call__(self, x):
        return self.matvec(x)

    def to_dense(self, which=None):
        return self.matvec(np.eye(self.n), which)


class DenseOperator(CovOperator):
    backend = "dense"

    def __init__(self, K, Ks, model=None):
        K = np.asarray(K, dtype=float)
        Ks = [np.asarray(Ki, dtype=float) for Ki in Ks]
        if model is None:
            model = _Anonymous(len(Ks))
        super().__init__(K.shape[0], model)
        self.K = K
        self.Ks = Ks
        self._chol = None

    @classmethod
    def from_matrices(cls, K, Ks):
        return cls(K, Ks)

    def _apply(self, X, whichs):
        return [(self.K if w is None else self.Ks[w]) @ X for w in whichs]

    def cholesky(self):
        if self._chol is None:
            try:
                self._chol = linalg.cho_factor(self.K, lower=True)
            except linalg.LinAlgError as exc:
                raise NumericError(f"covariance not positive definite: {exc}") from exc
        return self._chol

    def to_dense(self, which=None):
        return (self.K if which is None else self.Ks[which]).copy()


class _Anonymous:
    name = "matrix"

    def __init__(self, p):
        self.p = p
        self.theta = np.zeros(p)


class CirculantOperator(CovOperator):
    """Stationary kernel on (a subset of) a regular grid via FFT embedding."""

    backend = "circulant"

    def __init__(self, model, grid, plan):
        super().__init__(plan.n_f, model)
        dims = grid.dims
        self.embed = tuple(sfft.next_fast_len(2 * m - 1, real=True) for m in dims)
        maxlag = tuple(m - 1 for m in dims)
        table = lag_table(model, maxlag, grid.spacing, plan.tau, plan.stencil)
        emb = np.zeros((table.shape[0],) + self.embed)
        idx = []
        for k, m in enumerate(dims):
            j = np.arange(self.embed[k])
            lag = np.where(j <= m - 1, j, j - self.embed[k])
            ok = np.abs(lag) <= m - 1
            idx.append((j[ok], lag[ok] + m - 1))
        dst = np.ix_(*[a for a, _ in idx])
        src = np.ix_(*[b for _, b in idx])
        emb[(slice(None),) + dst] = table[(slice(None),) + src]
        if not np.all(np.isfinite(emb)):
            raise NumericError("kernel is not finite on the embedding")
        axes = tuple(range(1, 1 + len(dims)))
        self.spectra = sfft.rfftn(emb, axes=axes)
        ij = grid.multi_index(plan.retained)
        self.flat = np.ravel_multi_index(ij.T, self.embed)
        self.d = len(dims)

    def _apply(self, X, whichs):
        s = X.shape[1]
        buf = np.zeros((s, int(np.prod(self.embed))))
        buf[:, self.flat] = X.T
        buf = buf.reshape((s,) + self.embed)
        axes = tuple(range(1, 1 + self.d))
        xh = sfft.rfftn(buf, axes=axes, workers=1, overwrite_x=True)
        out = []
        for w in whichs:
            spec = self.spectra[0 if w is None else 1 + w]
            y = sfft.irfftn(xh * spec, s=self.embed, axes=axes, workers=1, overwrite_x=True)
            out.append(y.reshape(s, -1)[:, self.flat].T)
        return out


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Latitude band observed at local noon on consecutive days.

    The data vector is ordered by day, then longitude, then latitude (south
    to north), which is also increasing observation time.  Longitude grows
    westward and the observation time is ``day + lon / 360``.
    """

    lats: np.ndarray
    lon0: float
    dlon: float
    n_lon: int
    n_days: int
    mask: np.ndarray = None

    def __post_init__(self):
        lats = np.asarray(self.lats, dtype=float)
        object.__setattr__(self, "lats", lats)
        shape = (int(self.n_days), int(self.n_lon), lats.size)
        mask = np.ones(shape, dtype=bool) if self.mask is None else np.asarray(self.mask, bool)
        if mask.shape != shape:
            raise ShapeError(f"mask shape {mask.shape} != {shape}")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "observed", np.flatnonzero(mask.ravel()))

    @property
    def n(self):
        return int(self.observed.size)

    @property
    def shape(self):
        return self.mask.shape

    def sites(self):
        """(lat, lon, t) of every observed point in data order."""
        day, ilon, ilat = np.unravel_index(self.observed, self.shape)
        lon = self.lon0 + ilon * self.dlon
        return self.lats[ilat], lon, day + lon / 360.0

    def describe(self):
        return {
            "lats": ",".join(f"{x:g}" for x in self.lats),
            "lon0": self.lon0,
            "dlon": self.dlon,
            "n_lon": self.n_lon,
            "n_days": self.n_days,
            "n_observed": self.n,
        }


def spacetime_cov(model, stgrid, rows=None, cols=None, grads=True):
    """Dense (sub)matrix of the space-time covariance and its gradients."""
    lat, lon, t = stgrid.sites()
    rows = slice(None) if rows is None else rows
    cols = slice(None) if cols is None else cols
    val, g = model.value_and_grad(
        lat[rows][:, None], lat[cols][None, :],
        lon[rows][:, None] - lon[cols][None, :],
        t[rows][:, None] - t[cols][None, :],
    )
    return (val, g) if grads else val


class BlockCirculantOperator(CovOperator):
    """Space-time covariance: one 2-D (day, lon) circulant per latitude pair."""

    backend = "block-circulant"

    def __init__(self, model, stgrid):
        super().__init__(stgrid.n, model)
        D, M, L = stgrid.shape
        self.stgrid = stgrid
        self.embed = (sfft.next_fast_len(2 * D - 1, real=True),
                      sfft.next_fast_len(2 * M - 1, real=True))
        dd = np.arange(-(D - 1), D)
        dl = np.arange(-(M - 1), M) * stgrid.dlon
        DD, DL = np.meshgrid(dd, dl, indexing="ij")
        T = DD + DL / 360.0
        p = model.p
        table = np.empty((1 + p, L, L) + DD.shape)
        for a in range(L):
            for b in range(L):
                val, g = model.value_and_grad(stgrid.lats[a], stgrid.lats[b], DL, T)
                table[0, a, b] = val
                table[1:, a, b] = g
        emb = np.zeros((1 + p, L, L) + self.embed)
        idx = []
        for k, m in enumerate((D, M)):
            j = np.arange(self.embed[k])
            lag = np.where(j <= m - 1, j, j - self.embed[k])
            ok = np.abs(lag) <= m - 1
            idx.append((j[ok], lag[ok] + m - 1))
        emb[:, :, :, idx[0][0][:, None], idx[1][0][None, :]] = \
            table[:, :, :, idx[0][1][:, None], idx[1][1][None, :]]
        if not np.all(np.isfinite(emb)):
            raise NumericError("kernel is not finite on the embedding")
        self.spectra = sfft.rfft2(emb, axes=(-2, -1))
        self.L = L
        day, ilon, ilat = np.unravel_index(stgrid.observed, stgrid.shape)
        self.pos = (ilat, day, ilon)

    def _apply(self, X, whichs):
        s = X.shape[1]
        buf = np.zeros((s, self.L) + self.embed)
        buf[(slice(None),) + self.pos] = X.T
        xh = sfft.rfft2(buf, axes=(-2, -1), workers=1)
        out = []
        for w in whichs:
            spec = self.spectra[0 if w is None else 1 + w]
            yh = np.einsum("abij,sbij->saij", spec, xh, optimize=True)
            y = sfft.irfft2(yh, s=self.embed, axes=(-2, -1), workers=1)
            out.append(y[(slice(None),) + self.pos].T)
        return out


def dense_matrices(model, grid, plan=None):
    """Dense ``K`` and ``[K_i]`` on the retained points (or space-time sites)."""
    if isinstance(grid, SpaceTimeGrid):
        val, g = spacetime_cov(model, grid)
        return val, list(g)
    if plan is None:
        plan = build_filter_plan(grid, 0)
    maxlag = tuple(m - 1 for m in grid.dims)
    table = lag_table(model, maxlag, grid.spacing, plan.tau, plan.stencil)
    ij = grid.multi_index(plan.retained)
    diff = ij[:, None, :] - ij[None, :, :] + np.asarray(maxlag)
    mats = table[(slice(None),) + tuple(diff[..., k] for k in range(grid.d))]
    return mats[0], list(mats[1:])


def build_operator(model, grid, plan=None, backend="circulant"):
    """Covariance operator for ``model`` on the retained points of ``grid``."""
    if isinstance(grid, SpaceTimeGrid):
        if backend == "dense":
            K, Ks = dense_matrices(model, grid)
            return DenseOperator(K, Ks, model)
        if backend in ("block-circulant", "circulant"):
            return BlockCirculantOperator(model, grid)
        raise ValueError(f"backend {backend!r} not available for space-time grids")
    if plan is None:
        plan = build_filter_plan(grid, 0)
    if backend == "dense":
        K, Ks = dense_matrices(model, grid, plan)
        if not np.all(np.isfinite(K)):
            raise NumericError("kernel is not finite")
        return DenseOperator(K, Ks, model)
    if backend == "circulant":
        return CirculantOperator(model, grid, plan)
    raise ValueError(f"unknown backend {backend!r}")


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def _embedding_spectrum(model, grid, plan, embed):
    maxlag = tuple(e // 2 for e in embed)
    table = lag_table(model, maxlag, grid.spacing, plan.tau, plan.stencil)[0]
    emb = np.empty(embed)
    idx = []
    for k, e in enumerate(embed):
        j = np.arange(e)
        lag = np.where(j <= e // 2, j, j - e)
        idx.append(lag + maxlag[k])
    emb[...] = table[np.ix_(*idx)]
    return sfft.fftn(emb).real


def simulate_gp(model, grid, plan=None, seed=0, size=None):
    """Mean-zero Gaussian draw(s) of the data the estimator consumes.

    On an :class:`OccludedGrid` the (filtered, if ``plan.tau > 0``) process is
    simulated by circulant embedding and restricted to the retained points.
    On a :class:`SpaceTimeGrid` a dense Cholesky factor is used.
    Returns shape ``(n,)`` or ``(size, n)``.
    """
    rng = np.random.default_rng(seed)
    count = 1 if size is None else int(size)
    if isinstance(grid, SpaceTimeGrid):
        K = np.empty((grid.n, grid.n))
        for start in range(0, grid.n, 512):
            rows = np.arange(start, min(start + 512, grid.n))
            K[rows] = spacetime_cov(model, grid, rows=rows, grads=False)
        try:
            L = linalg.cholesky(K, lower=True)
        except linalg.LinAlgError as exc:
            raise SimulationError(f"space-time covariance not positive definite: {exc}")
        draws = (L @ rng.standard_normal((grid.n, count))).T
        return draws[0] if size is None else draws
    if plan is None:
        plan = build_filter_plan(grid, 0)
    embed = tuple(sfft.next_fast_len(2 * (m - 1) if m > 1 else 1) for m in grid.dims)
    embed = tuple(e + (e % 2) for e in embed)
    for attempt in range(2):
        lam = _embedding_spectrum(model, grid, plan, embed)
        if lam.min() >= -NEG_TOL * lam.max():
            break
        embed = tuple(2 * e for e in embed)
    else:
        raise SimulationError(
            f"negative embedding eigenvalue {lam.min():.3g}; use a larger grid embedding"
        )
    lam = np.clip(lam, 0, None)
    scale = np.sqrt(lam / lam.size)
    flat = np.ravel_multi_index(grid.multi_index(plan.retained).T, embed)
    draws = []
    while len(draws) < count:
        eps = rng.standard_normal(embed) + 1j * rng.standard_normal(embed)
        z = sfft.fftn(scale * eps).ravel()
        draws.append(z.real[flat])
        if len(draws) < count:
            draws.append(z.imag[flat])
    draws = np.array(draws[:count])
    return draws[0] if size is None else draws


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------

def bench_matvec(sizes, backends=("circulant",), repeats=5, columns=1, model=None, seed=0,
                 min_time=0.02):
    """Per-matvec timings on disc-occluded grids with ``prod(dims)`` points.

    ``sizes`` is a list of grid dims.  Returns rows ``(n, backend, seconds)``
    where ``seconds`` is the best over ``repeats`` rounds of the mean time of
    one matvec.  Each round loops enough matvecs to last about ``min_time``,
    and rounds visit all operators in turn so that load spikes on a shared
    machine hit every size alike.
    """
    from .kernels import PowerLawParams

    model = model or PowerLawModel(PowerLawParams(1.5, (7.0, 10.0)))
    rng = np.random.default_rng(seed)
    cases = []
    for dims in sizes:
        dims = tuple(dims)
        spacing = tuple(100.0 / (m - 1) for m in dims)
        grid = build_disc_occluded_grid(dims, spacing, (40.0, 60.0), 10.0)
        plan = build_filter_plan(grid, 1)
        for backend in backends:
            if backend == "dense" and plan.n_f > 6000:
                continue
            op = build_operator(model, grid, plan, backend)
            x = rng.standard_normal((op.n, columns))
            t0 = time.perf_counter()
            op.matvec(x)
            loops = max(1, int(min_time / max(time.perf_counter() - t0, 1e-9)))
            cases.append((int(np.prod(dims)), backend, op, x, loops))
    best = [np.inf] * len(cases)
    for _ in range(repeats):
        for k, (_, _, op, x, loops) in enumerate(cases):
            t0 = time.perf_counter()
            for _ in range(loops):
                op.matvec(x)
            best[k] = min(best[k], (time.perf_counter() - t0) / loops)
    return [(n, backend, t) for (n, backend, *_), t in zip(cases, best)]

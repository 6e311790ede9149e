"""Occluded grids, discrete-Laplacian filtering and zigzag blocking."""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal, sparse

from . import _accel
from .errors import GeometryError, ShapeError


@dataclass(frozen=True)
class OccludedGrid:
    """Regular grid with an availability mask.

    Axis 0 is ``x`` (horizontal) and axis 1 is ``y`` (vertical).  Flat
    indices follow C order of ``dims``.
    """

    dims: tuple
    spacing: tuple
    mask: np.ndarray
    origin: tuple = None
    occlusion: dict = field(default_factory=dict)

    def __post_init__(self):
        dims = tuple(int(m) for m in self.dims)
        if not dims or any(m < 1 for m in dims):
            raise GeometryError(f"invalid grid dims {self.dims}")
        spacing = np.broadcast_to(np.asarray(self.spacing, dtype=float), (len(dims),))
        if np.any(spacing <= 0):
            raise GeometryError("grid spacing must be positive")
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != dims:
            raise ShapeError(f"mask shape {mask.shape} != dims {dims}")
        if not mask.any():
            raise GeometryError("occlusion leaves no observed points")
        origin = (0.0,) * len(dims) if self.origin is None else tuple(map(float, self.origin))
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", tuple(spacing))
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "origin", origin)
        observed = np.flatnonzero(mask.ravel())
        full_to_obs = np.full(mask.size, -1, dtype=np.int64)
        full_to_obs[observed] = np.arange(observed.size)
        object.__setattr__(self, "observed", observed)
        object.__setattr__(self, "full_to_obs", full_to_obs)

    @property
    def d(self):
        return len(self.dims)

    @property
    def n(self):
        return int(self.observed.size)

    @property
    def size(self):
        return int(np.prod(self.dims))

    def multi_index(self, flat):
        return np.stack(np.unravel_index(flat, self.dims), axis=-1)

    def coords(self, flat=None):
        flat = self.observed if flat is None else flat
        idx = self.multi_index(flat)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def describe(self):
        """Plain key-value description used inside run reports."""
        out = {
            "dims": "x".join(map(str, self.dims)),
            "spacing": ",".join(f"{s:.10g}" for s in self.spacing),
            "n_observed": self.n,
        }
        for k, v in self.occlusion.items():
            out[f"occlusion.{k}"] = v
        return out


def spacing_for_extent(dims, length=100.0):
    """Spacing that spreads ``dims`` points over ``[0, length]`` on each axis."""
    return tuple(length / (m - 1) if m > 1 else 1.0 for m in dims)


def build_disc_occluded_grid(dims, spacing, disc_center, disc_radius, origin=None):
    """Grid with points at distance < ``disc_radius`` from ``disc_center`` removed."""
    dims = tuple(int(m) for m in dims)
    if any(m < 1 for m in dims):
        raise GeometryError(f"invalid grid dims {dims}")
    if disc_radius < 0:
        raise GeometryError("disc radius must be nonnegative")
    spacing = np.broadcast_to(np.asarray(spacing, dtype=float), (len(dims),))
    origin = np.zeros(len(dims)) if origin is None else np.asarray(origin, dtype=float)
    axes = [origin[k] + spacing[k] * np.arange(m) for k, m in enumerate(dims)]
    mesh = np.meshgrid(*axes, indexing="ij")
    center = np.asarray(disc_center, dtype=float)
    dist2 = sum((mesh[k] - center[k]) ** 2 for k in range(len(dims)))
    mask = dist2 >= disc_radius ** 2
    if disc_radius == 0:
        mask[...] = True
    occlusion = {
        "kind": "disc",
        "center": ",".join(f"{c:g}" for c in center),
        "radius": f"{disc_radius:g}",
    }
    return OccludedGrid(dims, tuple(spacing), mask, tuple(origin), occlusion)


def full_grid(dims, spacing=1.0):
    dims = tuple(int(m) for m in dims)
    return OccludedGrid(dims, spacing, np.ones(dims, dtype=bool), occlusion={"kind": "none"})


# ---------------------------------------------------------------------------
# filtering
# ---------------------------------------------------------------------------

def laplacian_stencil(d, tau):
    """Coefficients of the ``tau``-fold discrete Laplacian on a ``(2 tau + 1)^d`` box."""
    base = np.zeros((3,) * d)
    center = (1,) * d
    for p in range(d):
        for s in (0, 2):
            idx = list(center)
            idx[p] = s
            base[tuple(idx)] += 1.0
    base[center] -= 2.0 * d
    out = np.ones((1,) * d)
    for _ in range(tau):
        out = signal.convolve(out, base)
    return out


@dataclass(frozen=True)
class FilterPlan:
    """Points kept after ``tau`` Laplacian applications.

    ``retained`` holds full-grid flat indices in raster order;
    ``retained_obs`` the same points as positions in the observed vector.
    """

    tau: int
    retained: np.ndarray
    retained_obs: np.ndarray
    stencil: np.ndarray

    @property
    def n_f(self):
        return int(self.retained.size)


def build_filter_plan(grid, tau):
    """Keep points whose neighbors needed at every filtering stage are observed."""
    tau = int(tau)
    if tau < 0:
        raise GeometryError("tau must be nonnegative")
    avail = grid.mask.copy()
    for _ in range(tau):
        nxt = avail.copy()
        for p in range(grid.d):
            lo = [slice(None)] * grid.d
            hi = [slice(None)] * grid.d
            edge_lo = [slice(None)] * grid.d
            edge_hi = [slice(None)] * grid.d
            lo[p], hi[p] = slice(1, None), slice(None, -1)
            edge_lo[p], edge_hi[p] = slice(0, 1), slice(-1, None)
            # neighbor at -1 along p
            nxt[tuple(lo)] &= avail[tuple(hi)]
            # neighbor at +1 along p
            nxt[tuple(hi)] &= avail[tuple(lo)]
            nxt[tuple(edge_lo)] = False
            nxt[tuple(edge_hi)] = False
        avail = nxt
    retained = np.flatnonzero(avail.ravel())
    if retained.size == 0:
        raise GeometryError(f"no points survive {tau} filtering stages")
    return FilterPlan(tau, retained, grid.full_to_obs[retained], laplacian_stencil(grid.d, tau))


def _flat_stencil(grid, plan):
    w = plan.stencil
    offs = np.argwhere(w != 0) - plan.tau
    strides = np.array([int(np.prod(grid.dims[k + 1:])) for k in range(grid.d)])
    delta = offs @ strides
    return delta.astype(np.int64), w[w != 0].astype(float)


def apply_laplacian(grid, plan, field, use_numba=None):
    """Filter observed values (length ``n``, or ``n x s``) to the retained points."""
    field = np.asarray(field, dtype=float)
    vec = field.ndim == 1
    f2 = field[:, None] if vec else field
    if f2.shape[0] != grid.n:
        raise ShapeError(f"field length {f2.shape[0]} != observed points {grid.n}")
    if plan.tau == 0:
        out = f2[plan.retained_obs]
    else:
        full = np.zeros((grid.size, f2.shape[1]))
        full[grid.observed] = f2
        delta, w = _flat_stencil(grid, plan)
        out = _accel.stencil_gather(full, plan.retained, delta, w, use_numba)
    return out[:, 0] if vec else out


def apply_laplacian_adjoint(grid, plan, vals, use_numba=None):
    """Transpose of :func:`apply_laplacian`: retained values back to observed points."""
    vals = np.asarray(vals, dtype=float)
    vec = vals.ndim == 1
    v2 = vals[:, None] if vec else vals
    if plan.tau == 0:
        out = np.zeros((grid.n, v2.shape[1]))
        out[plan.retained_obs] = v2
    else:
        delta, w = _flat_stencil(grid, plan)
        full = _accel.stencil_scatter(v2, plan.retained, delta, w, grid.size, use_numba)
        out = full[grid.observed]
    return out[:, 0] if vec else out


def filter_matrix(grid, plan):
    """Explicit sparse ``n_f x n`` filter matrix."""
    if plan.tau == 0:
        rows = np.arange(plan.n_f)
        return sparse.csr_matrix(
            (np.ones(plan.n_f), (rows, plan.retained_obs)), shape=(plan.n_f, grid.n)
        )
    delta, w = _flat_stencil(grid, plan)
    rows = np.repeat(np.arange(plan.n_f), delta.size)
    cols_full = (plan.retained[:, None] + delta[None, :]).ravel()
    cols = grid.full_to_obs[cols_full]
    vals = np.tile(w, plan.n_f)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(plan.n_f, grid.n))


def choose_tau(alpha, d):
    """Number of Laplacian applications: round((alpha + d) / 4), at least ceil(alpha / 2)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    tau = int(math.floor((alpha + d) / 4.0 + 0.5))
    return max(tau, int(math.ceil(alpha / 2.0 - 1e-12)))


# ---------------------------------------------------------------------------
# blocking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockAssignment:
    """Blocks of ``N`` filtered points for the dependent probe design.

    ``block_id[k]`` is the block of filtered point ``k`` or -1 for leftovers;
    ``members[b]`` lists the points of block ``b`` in zigzag order.
    """

    N: int
    block_id: np.ndarray
    members: np.ndarray
    leftover: np.ndarray

    @property
    def m(self):
        return int(self.members.shape[0])

    @property
    def n_f(self):
        return int(self.block_id.size)


def _stripe_bounds(ny, width):
    n_stripes = max(ny // width, 1)
    sizes = np.full(n_stripes, width)
    sizes[: ny - n_stripes * width] += 1
    return np.concatenate([[0], np.cumsum(sizes)])


def zigzag_order(ij, ny, N):
    """Zigzag ordering of 2-D integer positions ``ij`` (columns x, y).

    Horizontal stripes of ``floor(sqrt(N))`` rows run bottom to top; the
    first stripe is ordered by ``(x, y)``, the next by ``(-x, y)``, and so on.
    """
    ij = np.asarray(ij)
    width = max(int(math.isqrt(int(N))), 1)
    bounds = _stripe_bounds(int(ny), width)
    stripe = np.searchsorted(bounds, ij[:, 1], side="right") - 1
    x = np.where(stripe % 2 == 0, ij[:, 0], -ij[:, 0])
    return np.lexsort((ij[:, 1], x, stripe))


def assignment_from_order(order, n_f, N):
    N = int(N)
    if N < 1:
        raise ValueError("block size must be at least 1")
    order = np.asarray(order, dtype=np.int64)
    m = order.size // N
    block_id = np.full(n_f, -1, dtype=np.int64)
    members = order[: m * N].reshape(m, N)
    for b in range(m):
        block_id[members[b]] = b
    leftover = np.sort(order[m * N:])
    return BlockAssignment(N, block_id, members, leftover)


def zigzag_blocking(grid, plan, N):
    """Group filtered points of a 1-D or 2-D grid into zigzag blocks of ``N``."""
    ij = grid.multi_index(plan.retained)
    if grid.d == 1:
        order = np.argsort(ij[:, 0], kind="stable")
    elif grid.d == 2:
        order = zigzag_order(ij, grid.dims[1], N)
    else:
        raise GeometryError("zigzag blocking is defined for 1-D and 2-D grids")
    return assignment_from_order(order, plan.n_f, N)


def consecutive_blocking(n_f, N):
    """Blocks of consecutive indices; used for small verification instances."""
    return assignment_from_order(np.arange(n_f), n_f, N)

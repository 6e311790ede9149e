"""Covariance and generalized-covariance functions with parameter gradients.

Three model families are provided:

* :class:`PowerLawModel` -- the power-law generalized covariance with an
  elliptical radius, parameters ``(alpha, l_1, ..., l_d)``.  It is only
  conditionally positive definite and must be filtered before use.
* :class:`MaternModel` -- isotropic Matern covariance, parameters
  ``(sigma2, range)`` with fixed smoothness.
* :class:`SpaceTimeModel` -- Matern correlation of a combined time/space
  distance on a latitude band with zonal drift, parameters
  ``(theta0, theta1, theta2, v)``.

Each model evaluates ``value, grads`` where ``grads`` has a leading axis of
length ``p`` holding the partial derivatives with respect to the parameters
in the order of ``model.theta``.
"""
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import ParameterDomainError, ShapeError

EVEN_TOL = 1e-12
SMALL_X = 1e-8
# chord lengths on a sphere whose radius makes one degree of arc ~ one unit
DEG_RADIUS = 180.0 / np.pi


def _positive(name, value):
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ParameterDomainError(f"{name} must be positive, got {value}")
    return value


@dataclass(frozen=True)
class PowerLawParams:
    alpha: float
    lengths: tuple

    def __post_init__(self):
        object.__setattr__(self, "alpha", _positive("alpha", self.alpha))
        lengths = tuple(_positive("length", l) for l in np.atleast_1d(self.lengths))
        if len(lengths) < 1:
            raise ParameterDomainError("need at least one length scale")
        object.__setattr__(self, "lengths", lengths)


@dataclass(frozen=True)
class MaternParams:
    nu: float
    sigma2: float
    range: float

    def __post_init__(self):
        for name in ("nu", "sigma2", "range"):
            object.__setattr__(self, name, _positive(name, getattr(self, name)))


@dataclass(frozen=True)
class SpaceTimeParams:
    theta0: float
    theta1: float
    theta2: float
    v: float

    def __post_init__(self):
        for name in ("theta0", "theta1", "theta2"):
            object.__setattr__(self, name, _positive(name, getattr(self, name)))
        v = float(self.v)
        if not np.isfinite(v):
            raise ParameterDomainError("drift v must be finite")
        object.__setattr__(self, "v", v)


# ---------------------------------------------------------------------------
# scalar building blocks
# ---------------------------------------------------------------------------

def elliptical_radius(x, lengths):
    """sqrt(sum_k x_k^2 / l_k^2) over the last axis of ``x``."""
    lengths = np.asarray(lengths, dtype=float)
    if np.any(lengths <= 0) or not np.all(np.isfinite(lengths)):
        raise ParameterDomainError("lengths must be positive")
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != lengths.shape[-1]:
        raise ShapeError(f"lag dimension {x.shape[-1]} != {lengths.shape[-1]}")
    return np.sqrt(np.sum((x / lengths) ** 2, axis=-1))


def is_even_alpha(alpha):
    half = alpha / 2.0
    k = round(half)
    return k >= 1 and abs(half - k) < EVEN_TOL


def powerlaw_gc(r, alpha):
    """Power-law generalized covariance of a nonnegative radius.

    ``Gamma(-alpha/2) r^alpha`` unless ``alpha/2`` is a positive integer ``k``,
    in which case ``(-1)^(1+k) r^alpha log r``.  Returns 0 at ``r == 0``.
    """
    alpha = float(alpha)
    if not alpha > 0:
        raise ParameterDomainError(f"alpha must be positive, got {alpha}")
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    pos = r > 0
    rp = r[pos]
    if is_even_alpha(alpha):
        k = int(round(alpha / 2))
        out[pos] = (-1.0) ** (1 + k) * rp ** alpha * np.log(rp)
    else:
        out[pos] = special.gamma(-alpha / 2) * rp ** alpha
    return out if out.ndim else float(out)


def _matern_norm(nu):
    return 2.0 ** (nu - 1) * special.gamma(nu)


def matern_corr(x, nu):
    """Matern correlation (sqrt(2 nu) x)^nu K_nu(sqrt(2 nu) x) / (2^(nu-1) Gamma(nu))."""
    nu = _positive("nu", nu)
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ParameterDomainError("Matern argument must be nonnegative")
    out = np.ones_like(x)
    big = x >= SMALL_X
    u = np.sqrt(2 * nu) * x[big]
    out[big] = u ** nu * special.kv(nu, u) / _matern_norm(nu)
    return out if out.ndim else float(out)


def _matern_d_over_x(x, nu):
    """M'(x) / x for the Matern correlation, finite for every x >= 0.

    Uses d/du [u^nu K_nu(u)] = -u^nu K_{nu-1}(u).  Below ``SMALL_X`` the
    nu > 1 limit -nu/(nu-1) is used; for nu <= 1 the value at ``SMALL_X``
    is returned, every caller multiplies it by a squared lag.
    """
    x = np.asarray(x, dtype=float)
    if nu > 1:
        out = np.full_like(x, -nu / (nu - 1.0))
        big = x >= SMALL_X
    else:
        out = np.empty_like(x)
        big = np.ones(x.shape, dtype=bool)
        x = np.maximum(x, SMALL_X)
    u = np.sqrt(2 * nu) * x[big]
    out[big] = -2 * nu * u ** (nu - 1) * special.kv(nu - 1, u) / _matern_norm(nu)
    return out


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

class PowerLawModel:
    name = "powerlaw"

    def __init__(self, params):
        self.params = params

    @classmethod
    def from_theta(cls, theta):
        theta = np.asarray(theta, dtype=float)
        return cls(PowerLawParams(theta[0], tuple(theta[1:])))

    @property
    def d(self):
        return len(self.params.lengths)

    @property
    def p(self):
        return 1 + self.d

    @property
    def theta(self):
        return np.array((self.params.alpha,) + self.params.lengths)

    @property
    def param_names(self):
        return ["alpha"] + [f"l{k + 1}" for k in range(self.d)]

    def with_theta(self, theta):
        return PowerLawModel.from_theta(theta)

    def lag_value_and_grad(self, lags, shift=None):
        """Value and gradient at physical lags of shape ``(..., d)``.

        ``shift`` selects an integer ``k`` and evaluates
        ``Gamma(-alpha/2) (r^alpha - r^(2k))`` instead.  The subtracted term
        is a polynomial of degree ``2k`` in the lag, invisible after enough
        differencing, and removes the cancellation near even ``alpha``.
        """
        lags = np.asarray(lags, dtype=float)
        if lags.shape[-1] != self.d:
            raise ShapeError(f"lag dimension {lags.shape[-1]} != {self.d}")
        alpha = self.params.alpha
        ell = np.asarray(self.params.lengths)
        scaled2 = (lags / ell) ** 2
        r2 = scaled2.sum(axis=-1)
        pos = r2 > 0
        r2p = r2[pos]
        logr = 0.5 * np.log(r2p)
        ra = np.exp(alpha * logr)

        val = np.zeros(r2.shape)
        dalpha = np.zeros(r2.shape)
        # r^2 * d(value)/d(r^2)
        dr2 = np.zeros(r2.shape)
        if is_even_alpha(alpha):
            k = int(round(alpha / 2))
            s = (-1.0) ** (1 + k)
            val[pos] = s * ra * logr
            dalpha[pos] = s * ra * logr ** 2
            dr2[pos] = s * ra * (0.5 * alpha * logr + 0.5)
        else:
            c = special.gamma(-alpha / 2)
            dc = -0.5 * c * special.digamma(-alpha / 2)
            if shift is None:
                val[pos] = c * ra
                dalpha[pos] = dc * ra + c * ra * logr
                dr2[pos] = 0.5 * alpha * c * ra
            else:
                k = int(shift)
                r2k = np.exp(2 * k * logr)
                em1 = np.expm1((alpha - 2 * k) * logr)
                val[pos] = c * r2k * em1
                dalpha[pos] = dc * r2k * em1 + c * ra * logr
                dr2[pos] = c * (0.5 * alpha * ra - k * r2k)
                if k == 0:
                    val[~pos] = -c
                    dalpha[~pos] = -dc

        grads = np.zeros((self.p,) + r2.shape)
        grads[0] = dalpha
        frac = np.zeros(scaled2.shape)
        frac[pos] = scaled2[pos] / r2p[:, None]
        for j in range(self.d):
            grads[1 + j] = -2.0 / ell[j] * dr2 * frac[..., j]
        return val, grads


class MaternModel:
    """Isotropic Matern covariance ``sigma2 * M_nu(h / range)``; nu is fixed."""

    name = "matern"

    def __init__(self, params, d=1):
        self.params = params
        self.d = int(d)

    @property
    def p(self):
        return 2

    @property
    def theta(self):
        return np.array([self.params.sigma2, self.params.range])

    @property
    def param_names(self):
        return ["sigma2", "range"]

    def with_theta(self, theta):
        return MaternModel(MaternParams(self.params.nu, theta[0], theta[1]), self.d)

    def lag_value_and_grad(self, lags, shift=None):
        lags = np.asarray(lags, dtype=float)
        if lags.shape[-1] != self.d:
            raise ShapeError(f"lag dimension {lags.shape[-1]} != {self.d}")
        nu, s2, rho = self.params.nu, self.params.sigma2, self.params.range
        h = np.sqrt(np.sum(lags ** 2, axis=-1))
        x = h / rho
        m = matern_corr(x, nu)
        grads = np.empty((2,) + x.shape)
        grads[0] = m
        # dM/drho = M'(x) * (-x / rho) = -(M'(x)/x) x^2 / rho
        grads[1] = -s2 * _matern_d_over_x(x, nu) * x ** 2 / rho
        return s2 * m, grads


def chord_sq(lat1, lat2, dlam):
    """Squared chord length between two points of a sphere of radius 180/pi.

    Latitudes and the longitude difference are in degrees, so a one-degree
    arc has length close to one.
    """
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dl = np.radians(dlam)
    return 4 * DEG_RADIUS ** 2 * (
        np.sin((p1 - p2) / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2) ** 2
    )


class SpaceTimeModel:
    """theta0 * M_nu(sqrt(T^2/theta1^2 + S^2/theta2^2)) with drift-adjusted S.

    ``S`` is the chord between ``(lat1, lon1 - v t1)`` and ``(lat2, lon2 - v t2)``,
    so it depends on the longitude difference only through ``dlon - v T``.
    """

    name = "spacetime"
    param_names = ["theta0", "theta1", "theta2", "v"]

    def __init__(self, params, nu=1.0):
        self.params = params
        self.nu = _positive("nu", nu)

    @property
    def p(self):
        return 4

    @property
    def theta(self):
        q = self.params
        return np.array([q.theta0, q.theta1, q.theta2, q.v])

    def with_theta(self, theta):
        return SpaceTimeModel(SpaceTimeParams(*theta), self.nu)

    def value_and_grad(self, lat1, lat2, dlon, T):
        q = self.params
        lat1, lat2, dlon, T = np.broadcast_arrays(
            *(np.asarray(a, dtype=float) for a in (lat1, lat2, dlon, T))
        )
        dlam = dlon - q.v * T
        s2 = chord_sq(lat1, lat2, dlam)
        x = np.sqrt(T ** 2 / q.theta1 ** 2 + s2 / q.theta2 ** 2)
        m = matern_corr(x, self.nu)
        dox = _matern_d_over_x(x, self.nu)
        ds2_dv = (
            -2 * DEG_RADIUS * np.cos(np.radians(lat1)) * np.cos(np.radians(lat2))
            * np.sin(np.radians(dlam)) * T
        )
        grads = np.empty((4,) + x.shape)
        grads[0] = m
        grads[1] = q.theta0 * dox * (-(T ** 2) / q.theta1 ** 3)
        grads[2] = q.theta0 * dox * (-s2 / q.theta2 ** 3)
        grads[3] = q.theta0 * dox * 0.5 * ds2_dv / q.theta2 ** 2
        return q.theta0 * m, grads


def kernel_derivatives(model, lag, t_lag=None):
    """Kernel value and its ``p`` parameter partials at one lag.

    For the space-time model ``lag`` is ``(lat1, lat2, dlon)`` in degrees and
    ``t_lag`` the time difference in days.
    """
    if isinstance(model, SpaceTimeModel):
        lat1, lat2, dlon = lag
        val, grads = model.value_and_grad(lat1, lat2, dlon, 0.0 if t_lag is None else t_lag)
    else:
        val, grads = model.lag_value_and_grad(np.asarray(lag, dtype=float))
    return float(val), np.asarray(grads, dtype=float).reshape(model.p)

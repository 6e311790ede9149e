"""Solving the estimating equations.

Power-law fits use a profile method: for fixed ``alpha`` the length scales
solve the length components of ``g`` by Fisher scoring, which leaves a
one-variable equation ``g_alpha(alpha, l(alpha)) = 0`` handled by Brent's
method.  Probe sets are fixed for the whole fit, so every equation is a
deterministic function of the parameters.

Space-time fits profile the scale ``theta0`` in closed form and run Fisher
scoring on the remaining three parameters.
"""
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .errors import ConvergenceError, FitError, NumericError, ParameterDomainError
from .gridfilter import build_filter_plan, zigzag_blocking
from .kernels import PowerLawModel, SpaceTimeModel, SpaceTimeParams
from .linsolve import SolveOptions, solve
from .operators import SpaceTimeGrid, build_operator, lag_table
from .precond import build_preconditioner
from .probes import sample_independent_probes, sample_probes
from .score import (
    InfoEstimates,
    estimate_fisher,
    estimate_information,
    eval_g,
    exact_fisher,
    exact_score,
)

ALPHA_MARGIN = 0.2


@dataclass
class FitOptions:
    bracket: tuple = None
    alpha_tol: float = 1e-4
    inner_tol: float = 1e-6
    inner_maxiter: int = 50
    n_info_inner: int = 32
    n_info: int = 100
    theta0: np.ndarray = None
    backend: str = "circulant"
    solver: SolveOptions = field(default_factory=SolveOptions)
    precond: str = "none"
    precond_depth: int = 20
    info_seed: int = None
    compute_info: bool = True


@dataclass
class FitReport:
    theta: np.ndarray
    param_names: list
    g: np.ndarray
    info: InfoEstimates = None
    trace: list = field(default_factory=list)
    seeds: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    status: str = "converged"
    extra: dict = field(default_factory=dict)

    @property
    def g_norm(self):
        return float(np.linalg.norm(self.g))

    def sd_godambe(self):
        return self.info.sd_godambe() if self.info is not None else None

    def sd_fisher(self):
        return self.info.sd_fisher() if self.info is not None else None

    def sd_ratio(self):
        return self.info.sd_ratio() if self.info is not None else None


# ---------------------------------------------------------------------------
# problems: g(theta) and an information surrogate
# ---------------------------------------------------------------------------

class ScoreProblem:
    """Stochastic estimating equations on filtered grid data with fixed probes."""

    def __init__(self, family, grid, plan, Z, probes, info_probes, opts=None):
        self.family = family
        self.grid = grid
        self.plan = plan
        self.Z = np.asarray(Z, dtype=float)
        self.probes = probes
        self.info_probes = info_probes
        self.opts = opts or FitOptions()
        self._cache = {}
        self.evaluations = 0

    def model(self, theta):
        return self.family.from_theta(theta)

    def operator(self, theta):
        key = tuple(np.round(np.asarray(theta, dtype=float), 15))
        if key not in self._cache:
            if len(self._cache) > 2:
                self._cache.clear()
            self._cache[key] = build_operator(self.model(theta), self.grid, self.plan,
                                              self.opts.backend)
        return self._cache[key]

    def _solver(self, theta):
        opts = self.opts.solver
        if self.opts.precond == "banded-ichol" and opts.method != "direct":
            M = build_preconditioner("banded-ichol", self.model(theta), self.grid, self.plan,
                                     self.opts.precond_depth)
            opts = SolveOptions(opts.tol, opts.maxiter, M, opts.method)
        return opts

    def g(self, theta):
        self.evaluations += 1
        return eval_g(self.operator(theta), self.Z, self.probes, self._solver(theta)).g

    def fisher(self, theta):
        return estimate_fisher(self.operator(theta), self.info_probes, self._solver(theta))

    def information(self, theta, probes2):
        return estimate_information(self.operator(theta), probes2, self.probes.N,
                                    self._solver(theta))


class ExactScoreProblem(ScoreProblem):
    """Exact score equations with dense factorizations (small grids)."""

    def __init__(self, family, grid, plan, Z, opts=None):
        opts = opts or FitOptions(backend="dense")
        super().__init__(family, grid, plan, Z, None, None, opts)
        self.opts.backend = "dense"

    def g(self, theta):
        self.evaluations += 1
        op = self.operator(theta)
        return exact_score(op.K, op.Ks, self.Z)

    def fisher(self, theta):
        op = self.operator(theta)
        return exact_fisher(op.K, op.Ks)

    def information(self, theta, probes2=None):
        I = self.fisher(theta)
        p = I.shape[0]
        return InfoEstimates(I, np.zeros((p, p)), I, 0, 1)


# ---------------------------------------------------------------------------
# power-law profile fit
# ---------------------------------------------------------------------------

def _newton_decrement(gl, Ill):
    try:
        step = np.linalg.solve(Ill, gl)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"singular length-scale information: {exc}") from exc
    dec2 = float(gl @ step)
    if dec2 < 0:
        raise NumericError("length-scale information is not positive definite")
    return step, np.sqrt(dec2)


def inner_solve_lengths(problem, alpha, ell_init, tol=1e-6, maxiter=50, trace=None):
    """Solve the length-scale equations with ``alpha`` held fixed.

    Fisher scoring ``l <- l + I_ll^-1 g_l`` with step halving whenever the
    step does not reduce ``|g_l|``.  Stops when the Newton decrement
    ``sqrt(g_l' I_ll^-1 g_l)`` (a distance in standard-error units) is below
    ``tol``.  Returns ``(ell, g_full, iterations)``.
    """
    ell = np.asarray(ell_init, dtype=float).copy()
    theta = np.concatenate([[alpha], ell])
    g = problem.g(theta)
    for it in range(maxiter + 1):
        gl = g[1:]
        Ill = problem.fisher(theta)[1:, 1:]
        step, dec = _newton_decrement(gl, Ill)
        if trace is not None:
            trace.append({"alpha": alpha, "iter": it, "ell": ell.tolist(),
                          "g_norm": float(np.linalg.norm(gl)), "decrement": dec})
        if dec <= tol:
            return ell, g, it
        if it == maxiter:
            break
        norm0 = np.linalg.norm(gl)
        accepted = False
        for _ in range(30):
            new = ell + step
            bad = new <= 0
            new[bad] = ell[bad] / 2
            theta_new = np.concatenate([[alpha], new])
            try:
                g_new = problem.g(theta_new)
            except (NumericError, ParameterDomainError, ConvergenceError):
                step = step / 2
                continue
            if np.linalg.norm(g_new[1:]) < norm0:
                accepted = True
                break
            step = step / 2
        if not accepted:
            # no decrease at all: we sit on the numerical noise floor of g
            if dec <= np.sqrt(tol):
                return ell, g, it
            raise ConvergenceError(
                f"length-scale scoring stalled at alpha={alpha:.6g} (decrement {dec:.3g})",
                trace,
            )
        ell, theta, g = new, theta_new, g_new
    raise ConvergenceError(
        f"length-scale scoring did not converge in {maxiter} iterations at alpha={alpha:.6g}",
        trace,
    )


def alpha_domain(tau):
    """Admissible ``alpha`` after ``tau`` filtering stages, with a safety margin."""
    return ALPHA_MARGIN, 4.0 * tau - ALPHA_MARGIN


def _empirical_cov(grid, plan, Z, lag):
    ij = grid.multi_index(plan.retained)
    pos = np.full(grid.dims, -1, dtype=np.int64)
    pos[tuple(ij.T)] = np.arange(plan.n_f)
    tgt = ij + np.asarray(lag)
    ok = np.all((tgt >= 0) & (tgt < np.asarray(grid.dims)), axis=1)
    j = np.full(plan.n_f, -1)
    j[ok] = pos[tuple(tgt[ok].T)]
    ok &= j >= 0
    if not ok.any():
        return None
    return float(np.mean(Z[ok] * Z[j[ok]]))


def moment_initializer(grid, plan, Z):
    """Cheap starting values from empirical covariances of the filtered data.

    Matches the filtered-model covariance at lag 0, unit lags along each
    axis and twice those lags by least squares over ``(alpha, log l)``.
    """
    d = grid.d
    lags = [np.zeros(d, int)]
    for k in range(d):
        for s in (1, 2):
            e = np.zeros(d, int)
            e[k] = s
            lags.append(e)
    emp, used = [], []
    for lag in lags:
        c = _empirical_cov(grid, plan, Z, lag)
        if c is not None:
            emp.append(c)
            used.append(lag)
    emp = np.array(emp)
    used = np.array(used)
    scale = abs(emp[0])
    maxlag = tuple(int(used[:, k].max()) for k in range(d))
    lo, hi = alpha_domain(plan.tau)

    def resid(x):
        model = PowerLawModel.from_theta(np.concatenate([[x[0]], np.exp(x[1:])]))
        tab = lag_table(model, maxlag, grid.spacing, plan.tau, plan.stencil)[0]
        vals = tab[tuple((used + np.asarray(maxlag)).T)]
        return (vals - emp) / scale

    extent = np.asarray(grid.spacing) * (np.asarray(grid.dims) - 1)
    best = None
    for a0 in np.linspace(lo + 0.1, hi - 0.1, 5):
        for f in (0.05, 0.2):
            x0 = np.concatenate([[a0], np.log(f * extent)])
            try:
                res = optimize.least_squares(
                    resid, x0, bounds=([lo] + [-10] * d, [hi] + [10] * d))
            except (ValueError, FloatingPointError):
                continue
            if best is None or res.cost < best.cost:
                best = res
    if best is None:
        raise FitError("moment initializer failed")
    return np.concatenate([[best.x[0]], np.exp(best.x[1:])])


def solve_fit(problem, opts=None, theta0=None):
    """Profile fit of the power-law model.  Returns a :class:`FitReport`."""
    opts = opts or problem.opts
    t_start = time.perf_counter()
    tau = problem.plan.tau
    lo_dom, hi_dom = alpha_domain(tau)
    if theta0 is None:
        theta0 = opts.theta0
    if theta0 is None:
        theta0 = moment_initializer(problem.grid, problem.plan, problem.Z)
    theta0 = np.asarray(theta0, dtype=float)
    alpha0 = float(np.clip(theta0[0], lo_dom + 0.05, hi_dom - 0.05))
    trace = []
    ells = {}

    def nearest_ell(alpha):
        if not ells:
            return theta0[1:]
        key = min(ells, key=lambda a: abs(a - alpha))
        return ells[key]

    def profile_g(alpha):
        ell, g, _ = inner_solve_lengths(problem, alpha, nearest_ell(alpha),
                                        opts.inner_tol, opts.inner_maxiter, trace)
        ells[alpha] = ell
        return g[0]

    samples = []

    def sample(alpha):
        val = profile_g(alpha)
        samples.append((alpha, val))
        return val

    if opts.bracket is not None:
        lo, hi = (max(opts.bracket[0], lo_dom), min(opts.bracket[1], hi_dom))
        flo, fhi = sample(lo), sample(hi)
    else:
        width = 0.25
        lo, hi = max(alpha0 - width, lo_dom), min(alpha0 + width, hi_dom)
        flo, fhi = sample(lo), sample(hi)
        grow = 0
        while np.sign(flo) == np.sign(fhi) and grow < 3:
            width *= 1.5
            grow += 1
            # g_alpha decreases in alpha near the root, so move towards it
            if flo > 0 and hi < hi_dom:
                lo, flo = hi, fhi
                hi = min(hi + width, hi_dom)
                fhi = sample(hi)
            elif fhi < 0 and lo > lo_dom:
                hi, fhi = lo, flo
                lo = max(lo - width, lo_dom)
                flo = sample(lo)
            else:
                lo, hi = max(lo - width, lo_dom), min(hi + width, hi_dom)
                flo, fhi = sample(lo), sample(hi)
        if np.sign(flo) == np.sign(fhi):
            grid_a = np.linspace(lo_dom, hi_dom, 9)
            vals = [sample(a) for a in grid_a]
            for a, b, fa, fb in zip(grid_a[:-1], grid_a[1:], vals[:-1], vals[1:]):
                if np.sign(fa) != np.sign(fb):
                    lo, hi, flo, fhi = a, b, fa, fb
                    break
    if np.sign(flo) == np.sign(fhi):
        raise FitError(
            "no sign change of the alpha equation; samples: "
            + ", ".join(f"({a:.4g}, {v:.4g})" for a, v in sorted(samples)),
            trace,
        )
    alpha_hat = optimize.brentq(profile_g, lo, hi, xtol=opts.alpha_tol)
    ell_hat, g_hat, _ = inner_solve_lengths(problem, alpha_hat, nearest_ell(alpha_hat),
                                            opts.inner_tol, opts.inner_maxiter, trace)
    theta_hat = np.concatenate([[alpha_hat], ell_hat])
    t_fit = time.perf_counter() - t_start
    info = None
    seeds = {}
    if problem.probes is not None:
        seeds["probes"] = problem.probes.seed
    if opts.compute_info:
        info_seed = opts.info_seed if opts.info_seed is not None else seeds.get("probes", 0) + 7919
        seeds["info"] = info_seed
        probes2 = sample_independent_probes(problem.plan.n_f, opts.n_info, info_seed)
        info = problem.information(theta_hat, probes2)
    report = FitReport(
        theta_hat,
        problem.model(theta_hat).param_names,
        g_hat,
        info,
        trace,
        seeds,
        {"fit_seconds": t_fit, "total_seconds": time.perf_counter() - t_start},
        extra={"alpha_samples": samples, "evaluations": problem.evaluations,
               "n_filtered": problem.plan.n_f, "tau": tau},
    )
    return report


def make_powerlaw_problem(grid, Z, tau, N, seed, design="independent", opts=None, exact=False):
    """Assemble a :class:`ScoreProblem` (or exact one) for filtered data ``Z``."""
    opts = opts or FitOptions()
    plan = build_filter_plan(grid, tau)
    if exact:
        return ExactScoreProblem(PowerLawModel, grid, plan, Z, opts)
    if design == "dependent":
        assignment = zigzag_blocking(grid, plan, N)
        probes = sample_probes(plan.n_f, N, seed, "dependent", assignment)
    else:
        probes = sample_probes(plan.n_f, N, seed, "independent")
    info_probes = sample_independent_probes(plan.n_f, opts.n_info_inner, seed + 104729)
    return ScoreProblem(PowerLawModel, grid, plan, Z, probes, info_probes, opts)


# ---------------------------------------------------------------------------
# space-time fit with profiled scale
# ---------------------------------------------------------------------------

def _st_model(phi, theta0=1.0, nu=1.0):
    return SpaceTimeModel(SpaceTimeParams(theta0, phi[0], phi[1], phi[2]), nu)


def _profiled_info(I):
    """Information for ``(theta1, theta2, v)`` after profiling out ``theta0``."""
    return I[1:, 1:] - np.outer(I[1:, 0], I[0, 1:]) / I[0, 0]


def solve_fit_spacetime(stgrid, Z, probes, opts=None, phi0=None, nu=1.0, info_probes=None):
    """Fit ``(theta0, theta1, theta2, v)`` with ``theta0`` profiled in closed form."""
    opts = opts or FitOptions(backend="block-circulant", precond="banded-ichol")
    t_start = time.perf_counter()
    Z = np.asarray(Z, dtype=float)
    n = Z.size
    phi = np.array([2.0, 10.0, 0.0] if phi0 is None else phi0, dtype=float)
    if info_probes is None:
        info_probes = sample_independent_probes(n, opts.n_info_inner, probes.seed + 104729)
    trace = []

    def pieces(phi):
        model = _st_model(phi, 1.0, nu)
        op = build_operator(model, stgrid, backend=opts.backend)
        sopts = opts.solver
        if opts.precond == "banded-ichol" and sopts.method != "direct":
            M = build_preconditioner("banded-ichol", model, stgrid, depth=opts.precond_depth)
            sopts = SolveOptions(sopts.tol, sopts.maxiter, M, sopts.method)
        ev = eval_g(op, Z, probes, sopts)
        theta0 = float(Z @ ev.KinvZ) / n
        # K = theta0 M: quadratic part scales by 1/theta0, trace part does not
        g = ev.quad[1:] / theta0 - 0.5 * ev.trace[1:]
        return op, sopts, theta0, g

    op, sopts, theta0, g = pieces(phi)
    status = "converged"
    for it in range(opts.inner_maxiter + 1):
        I = estimate_fisher(op, info_probes, sopts)
        Ip = _profiled_info(I)
        step, dec = _newton_decrement(g, Ip)
        trace.append({"iter": it, "theta0": theta0, "phi": phi.tolist(),
                      "g_norm": float(np.linalg.norm(g)), "decrement": dec})
        if dec <= opts.inner_tol:
            break
        if it == opts.inner_maxiter:
            raise ConvergenceError("space-time scoring did not converge", trace)
        # merit is g' Ip^-1 g at the current information; scoring steps are
        # descent directions for it, unlike for the raw norm of g
        Ip_inv = np.linalg.inv(Ip)
        merit0 = dec ** 2
        # positive parameters move by at most half their value per step
        rel = np.abs(step[:2]) / (0.5 * phi[:2])
        if rel.max() > 1:
            step = step / rel.max()
        accepted = False
        for _ in range(30):
            new = phi + step
            try:
                res = pieces(new)
            except (NumericError, ParameterDomainError, ConvergenceError):
                step = step / 2
                continue
            if res[3] @ Ip_inv @ res[3] < merit0:
                accepted = True
                break
            step = step / 2
        if not accepted:
            if dec <= np.sqrt(opts.inner_tol):
                status = "noise-floor"
                break
            raise ConvergenceError(f"space-time scoring stalled (decrement {dec:.3g})", trace)
        phi = new
        op, sopts, theta0, g = res
    theta_hat = np.concatenate([[theta0], phi])
    t_fit = time.perf_counter() - t_start
    info = None
    seeds = {"probes": probes.seed}
    if opts.compute_info:
        info_seed = opts.info_seed if opts.info_seed is not None else probes.seed + 7919
        seeds["info"] = info_seed
        model = _st_model(phi, theta0, nu)
        op_hat = build_operator(model, stgrid, backend=opts.backend)
        sopts = opts.solver
        if opts.precond == "banded-ichol" and sopts.method != "direct":
            M = build_preconditioner("banded-ichol", model, stgrid, depth=opts.precond_depth)
            sopts = SolveOptions(sopts.tol, sopts.maxiter, M, sopts.method)
        probes2 = sample_independent_probes(n, opts.n_info, info_seed)
        info = estimate_information(op_hat, probes2, probes.N, sopts)
    g_full = np.concatenate([[0.0], g])
    return FitReport(theta_hat, list(SpaceTimeModel.param_names), g_full, info, trace, seeds,
                     {"fit_seconds": t_fit, "total_seconds": time.perf_counter() - t_start},
                     status, {"n": n})


# ---------------------------------------------------------------------------
# N sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepConfig:
    dims: tuple = (16, 16)
    truth: tuple = (1.5, 7.0, 10.0)
    disc: tuple = (40.0, 60.0, 10.0)
    tau: int = 1
    Ns: tuple = (1, 2, 4, 8, 16, 32, 64)
    designs: tuple = ("independent", "dependent")
    reps: int = 50
    seed: int = 0
    backend: str = "dense"
    method: str = "direct"
    threads: int = 1


def _sweep_setup(cfg):
    from .gridfilter import build_disc_occluded_grid, spacing_for_extent
    from .kernels import PowerLawParams

    spacing = spacing_for_extent(cfg.dims)
    grid = build_disc_occluded_grid(cfg.dims, spacing, cfg.disc[:2], cfg.disc[2])
    plan = build_filter_plan(grid, cfg.tau)
    truth = np.asarray(cfg.truth, dtype=float)
    model = PowerLawModel(PowerLawParams(truth[0], tuple(truth[1:])))
    return grid, plan, truth, model


def sweep_replicate(cfg, r):
    """One replicate: exact fit plus every (design, N) stochastic fit.

    Returns ``(exact_theta or None, {(design, N): theta or None})``.
    """
    from .operators import simulate_gp

    grid, plan, truth, model = _sweep_setup(cfg)
    fopts = dict(backend=cfg.backend, solver=SolveOptions(method=cfg.method), compute_info=False)
    seed = cfg.seed * 100003 + r
    Z = simulate_gp(model, grid, plan, seed=seed)
    try:
        ex = solve_fit(ExactScoreProblem(PowerLawModel, grid, plan, Z, FitOptions(**fopts)),
                       theta0=truth)
    except (FitError, ConvergenceError, NumericError):
        return None, {}
    fits = {}
    for design in cfg.designs:
        for N in cfg.Ns:
            prob = make_powerlaw_problem(grid, Z, cfg.tau, N, seed + 7, design,
                                         FitOptions(**fopts))
            try:
                fits[(design, N)] = solve_fit(prob, theta0=ex.theta).theta
            except (FitError, ConvergenceError, NumericError):
                fits[(design, N)] = None
    return ex.theta, fits


def n_sweep_study(cfg, progress=None):
    """MSE of approximate-minus-exact estimates over MSE of exact estimates.

    For each replicate the same simulated data are fitted by the exact score
    equations and by the stochastic ones for every ``N`` and design.
    Returns a dict with ``ratios[design][N] -> p-vector`` plus failure counts.
    """
    truth = np.asarray(cfg.truth, dtype=float)
    p = truth.size
    if cfg.threads > 1:
        from concurrent.futures import ProcessPoolExecutor
        from functools import partial

        with ProcessPoolExecutor(cfg.threads) as pool:
            results = list(pool.map(partial(sweep_replicate, cfg), range(cfg.reps)))
    else:
        results = []
        for r in range(cfg.reps):
            results.append(sweep_replicate(cfg, r))
            if progress:
                progress(r)
    diffs = {d: {N: [] for N in cfg.Ns} for d in cfg.designs}
    failures = {d: {N: 0 for N in cfg.Ns} for d in cfg.designs}
    exact_err = []
    exact_fail = 0
    for ex, fits in results:
        if ex is None:
            exact_fail += 1
            continue
        exact_err.append(ex - truth)
        for (design, N), th in fits.items():
            if th is None:
                failures[design][N] += 1
            else:
                diffs[design][N].append(th - ex)
    mse_exact = np.mean(np.square(exact_err), axis=0) if exact_err else np.full(p, np.nan)
    ratios = {
        d: {N: (np.mean(np.square(diffs[d][N]), axis=0) / mse_exact if diffs[d][N]
                else np.full(p, np.nan)) for N in cfg.Ns}
        for d in cfg.designs
    }
    return {"ratios": ratios, "failures": failures, "exact_failures": exact_fail,
            "mse_exact": mse_exact, "reps": len(exact_err)}

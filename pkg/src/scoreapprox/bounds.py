"""Exhaustive checks of the variance bounds on small dense instances.

Each check returns rows ``(check, instance, value, threshold, passed)``;
the command line prints them as a table.
"""
from dataclasses import dataclass

import numpy as np

from .gridfilter import build_filter_plan, consecutive_blocking, full_grid
from .kernels import MaternModel, MaternParams, PowerLawModel, PowerLawParams
from .operators import dense_matrices
from .score import (
    dense_W,
    dependent_variance_gap,
    efficiency_bound,
    enumerated_score_cov,
    exact_fisher,
    exact_J,
)

TOL = 1e-9


@dataclass
class Instance:
    name: str
    K: np.ndarray
    Ks: list


def random_instance(n, p=2, seed=0, spread=10.0):
    """Random SPD ``K`` with eigenvalues in ``[1, spread]`` and symmetric ``K_i``."""
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    K = (Q * rng.uniform(1.0, spread, n)) @ Q.T
    Ks = []
    for _ in range(p):
        A = rng.standard_normal((n, n))
        Ks.append(A + A.T)
    return Instance(f"random(seed={seed})", 0.5 * (K + K.T), Ks)


def diagonal_instance(n, seed=0):
    rng = np.random.default_rng(seed)
    K = np.diag(rng.uniform(1, 5, n))
    Ks = [np.diag(rng.standard_normal(n)) for _ in range(2)]
    return Instance("diagonal", K, Ks)


def powerlaw_line_instance(n, alpha=1.5, length=5.0, tau=1):
    """Filtered power-law covariance on ``n`` retained points of a line."""
    grid = full_grid((n + 2 * tau,), 1.0)
    plan = build_filter_plan(grid, tau)
    K, Ks = dense_matrices(PowerLawModel(PowerLawParams(alpha, (length,))), grid, plan)
    return Instance(f"powerlaw-1d(alpha={alpha})", K, Ks)


def _cond(K):
    w = np.linalg.eigvalsh(K)
    return w[-1] / w[0]


def check_instance(inst, N, designs=("independent", "dependent")):
    rows = []
    n = inst.K.shape[0]
    I = exact_fisher(inst.K, inst.Ks)
    J = exact_J(inst.K, inst.Ks)
    covs = {}
    for design in designs:
        asg = consecutive_blocking(n, N) if design == "dependent" else None
        covs[design] = enumerated_score_cov(inst.K, inst.Ks, N, design, asg)
    C = covs.get("independent")
    kappa = _cond(inst.K)
    bound = efficiency_bound(kappa, N)
    if C is not None:
        slack_mat = I * (1 + bound) - C
        rows.append(("efficiency-bound-psd", inst.name, np.linalg.eigvalsh(slack_mat).min(), -TOL,
                     np.linalg.eigvalsh(slack_mat).min() >= -TOL))
        # how conservative: bound factor over the realized worst inflation
        Linv = np.linalg.inv(np.linalg.cholesky(I))
        infl = np.linalg.eigvalsh(Linv @ (C - I) @ Linv.T).max()
        slack = bound / infl if infl > 0 else np.inf
        rows.append(("efficiency-bound-slack", inst.name, slack, 1.0, slack >= 1.0 - 1e-9))
        err = np.abs(C - (I + J / (4 * N))).max()
        rows.append(("decomposition", inst.name, err, 1e-10 * max(1, np.abs(C).max()),
                     err <= 1e-10 * max(1, np.abs(C).max())))
        Ch = enumerated_score_cov(inst.K, inst.Ks, N, symmetrized=True)
        m = np.linalg.eigvalsh((1 + 1 / N) * I - Ch).min()
        rows.append(("symmetrized-bound", inst.name, m, -TOL, m >= -TOL))
    if C is not None and "dependent" in covs:
        Cd = covs["dependent"]
        m = np.linalg.eigvalsh(C - Cd).min()
        rows.append(("dependent-dominance", inst.name, m, -TOL, m >= -TOL))
        asg = consecutive_blocking(n, N)
        W = dense_W(inst.K, inst.Ks)
        rng = np.random.default_rng(n * 31 + N)
        worst = 0.0
        for _ in range(5):
            v = rng.standard_normal(len(W))
            worst = max(worst, abs(v @ (C - Cd) @ v - dependent_variance_gap(W, v, asg)))
        rows.append(("gap-identity", inst.name, worst, 1e-10, worst <= 1e-10))
    if np.allclose(inst.K, np.diag(np.diag(inst.K))):
        rows.append(("diagonal-J-zero", inst.name, np.abs(J).max(), 1e-12,
                     np.abs(J).max() <= 1e-12))
    return rows


def verify_bounds_suite(n=8, N=4, seeds=(0, 1, 2)):
    """All bound checks on random, diagonal and filtered power-law instances."""
    if n > 12:
        raise ValueError("exhaustive enumeration needs n <= 12")
    instances = [random_instance(n, seed=s) for s in seeds]
    instances.append(diagonal_instance(n))
    instances.append(powerlaw_line_instance(n))
    rows = []
    for inst in instances:
        rows.extend(check_instance(inst, N))
    return rows


def kappa_growth(ns=(32, 64, 128, 256), nu=1.0, extent=100.0, range_=10.0):
    """Condition number of ``K`` versus ``||I^-1 J||`` for an unfiltered 1-D Matern.

    Points fill ``[0, extent]`` more densely as ``n`` grows.
    """
    out = []
    for n in ns:
        grid = full_grid((n,), extent / (n - 1))
        plan = build_filter_plan(grid, 0)
        model = MaternModel(MaternParams(nu, 1.0, range_), d=1)
        K, Ks = dense_matrices(model, grid, plan)
        I = exact_fisher(K, Ks)
        J = exact_J(K, Ks)
        out.append((n, _cond(K), np.linalg.norm(np.linalg.solve(I, J), 2)))
    return out


def trace_study(K, Ks, Ns=(1, 2, 4, 8, 16, 32, 64), reps=200, seed=0, assignment_fn=None):
    """Monte Carlo variance of the trace estimators under both designs.

    Returns rows ``(design, N, i, variance)``; ``assignment_fn(N)`` gives the
    dependent-design blocks (consecutive by default).
    """
    from .probes import sample_probes

    W = dense_W(K, Ks)
    n = K.shape[0]
    rows = []
    for design in ("independent", "dependent"):
        for N in Ns:
            asg = None
            if design == "dependent":
                asg = assignment_fn(N) if assignment_fn else consecutive_blocking(n, N)
            est = np.empty((reps, len(W)))
            for r in range(reps):
                U = sample_probes(n, N, seed * 1000003 + r, design, asg).U
                est[r] = [np.einsum("nj,nm,mj->", U, Wi, U) / N for Wi in W]
            for i, v in enumerate(est.var(axis=0, ddof=1)):
                rows.append((design, N, i, v))
    return rows

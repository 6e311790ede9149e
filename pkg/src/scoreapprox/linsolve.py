"""Conjugate gradient solvers for symmetric positive definite operators.

Both solvers accept anything with a ``matvec`` method (or a plain callable)
and an optional preconditioner with an ``apply`` method approximating the
inverse.  Convergence is always judged on the true residual ``b - A x``.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import ConvergenceError, NumericError, ShapeError

DROP_TOL = 1e-12


@dataclass
class SolveOptions:
    tol: float = 1e-10
    maxiter: int = 1000
    precond: object = None
    method: str = "block-cg"
    callback: object = None
    trace: bool = False

    def __post_init__(self):
        if not 0 < self.tol < 1:
            raise ValueError("tolerance must lie in (0, 1)")
        if self.maxiter < 1:
            raise ValueError("maxiter must be at least 1")
        if self.method not in ("block-cg", "cg", "direct"):
            raise ValueError(f"unknown solver method {self.method!r}")


@dataclass
class SolveReport:
    iterations: int
    residuals: np.ndarray
    converged: np.ndarray
    matvecs: int
    precond_residuals: np.ndarray = None
    deflations: list = field(default_factory=list)
    history: list = field(default_factory=list)

    @property
    def all_converged(self):
        return bool(np.all(self.converged))

    def summary(self):
        return {
            "iterations": self.iterations,
            "matvecs": self.matvecs,
            "max_residual": float(np.max(self.residuals)) if self.residuals.size else 0.0,
            "converged": self.all_converged,
            "deflations": len(self.deflations),
        }


def _matvec(op):
    return op.matvec if hasattr(op, "matvec") else op


def _precond(M):
    if M is None:
        return lambda x: x
    return M.apply if hasattr(M, "apply") else M


def _rel(res, bnorm):
    return res / np.where(bnorm > 0, bnorm, 1.0)


def cg_solve(op, b, opts=None):
    """Preconditioned CG for a single right-hand side."""
    opts = opts or SolveOptions()
    A, M = _matvec(op), _precond(opts.precond)
    b = np.asarray(b, dtype=float)
    if b.ndim != 1:
        raise ShapeError("cg_solve expects a vector; use block_cg_solve for blocks")
    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b)
    if bnorm == 0:
        return x, SolveReport(0, np.zeros(1), np.ones(1, bool), 0)
    r = b.copy()
    z = M(r)
    q = z.copy()
    rz = r @ z
    history = []
    matvecs = 0
    rel = 1.0
    for it in range(1, opts.maxiter + 1):
        Aq = A(q)
        matvecs += 1
        qAq = q @ Aq
        if not qAq > 0:
            raise NumericError(f"CG breakdown: <Aq, q> = {qAq:.3g} at iteration {it}")
        step = rz / qAq
        x += step * q
        r -= step * Aq
        rel = np.linalg.norm(r) / bnorm
        if rel <= opts.tol:
            # confirm on the true residual before stopping
            r = b - A(x)
            matvecs += 1
            rel = np.linalg.norm(r) / bnorm
        if opts.trace:
            history.append((it, np.array([rel])))
        if opts.callback is not None:
            opts.callback(it, x, rel)
        if rel <= opts.tol:
            return x, SolveReport(it, np.array([rel]), np.array([True]), matvecs, history=history)
        z = M(r)
        rz_new = r @ z
        q = z + (rz_new / rz) * q
        rz = rz_new
    true_rel = np.linalg.norm(b - A(x)) / bnorm
    return x, SolveReport(opts.maxiter, np.array([true_rel]), np.array([true_rel <= opts.tol]),
                          matvecs + 1, np.array([rel]), history=history)


def _orth(P, ref_norms):
    """Orthonormal basis of range(P) dropping directions below the drop tolerance."""
    if P.shape[1] == 0:
        return P, 0
    Q, R, piv = linalg.qr(P, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    scale = max(ref_norms, diag[0] if diag.size else 0.0)
    keep = int(np.sum(diag > DROP_TOL * scale)) if scale > 0 else 0
    return Q[:, :keep], P.shape[1] - keep


def block_cg_solve(op, B, opts=None):
    """Block preconditioned CG (O'Leary) with rank-revealing deflation.

    The search block is re-orthonormalized every step, which removes the
    breakdown of the plain block recurrence when columns become dependent
    or converge at different rates.  Converged columns are frozen.
    """
    opts = opts or SolveOptions()
    A, M = _matvec(op), _precond(opts.precond)
    B = np.asarray(B, dtype=float)
    vec = B.ndim == 1
    if vec:
        B = B[:, None]
    n, s = B.shape
    bnorm = np.linalg.norm(B, axis=0)
    X = np.zeros_like(B)
    R = B.copy()
    active = bnorm > 0
    rel = np.zeros(s)
    history, deflations = [], []
    matvecs = 0
    if not active.any():
        rep = SolveReport(0, rel, np.ones(s, bool), 0)
        return (X[:, 0] if vec else X), rep

    Z = M(R[:, active])
    P, dropped = _orth(Z, 0.0)
    if dropped:
        deflations.append((0, dropped))
    it = 0
    for it in range(1, opts.maxiter + 1):
        if P.shape[1] == 0:
            break
        AP = A(P)
        matvecs += P.shape[1]
        PAP = P.T @ AP
        PAP = 0.5 * (PAP + PAP.T)
        try:
            cf = linalg.cho_factor(PAP)
        except linalg.LinAlgError:
            w = np.linalg.eigvalsh(PAP)
            raise NumericError(f"block CG breakdown: P'AP min eigenvalue {w.min():.3g}")
        idx = np.flatnonzero(active)
        alpha = linalg.cho_solve(cf, P.T @ R[:, idx])
        X[:, idx] += P @ alpha
        R[:, idx] -= AP @ alpha
        rel[idx] = _rel(np.linalg.norm(R[:, idx], axis=0), bnorm[idx])
        cand = idx[rel[idx] <= opts.tol]
        if cand.size:
            # confirm on the true residual; replace drifted recursive residuals
            R[:, cand] = B[:, cand] - A(X[:, cand])
            matvecs += cand.size
            rel[cand] = _rel(np.linalg.norm(R[:, cand], axis=0), bnorm[cand])
        if opts.trace:
            history.append((it, rel.copy()))
        if opts.callback is not None:
            opts.callback(it, X, rel.copy())
        done = rel[idx] <= opts.tol
        if done.all():
            active[:] = False
            break
        if done.any():
            active[idx[done]] = False
            deflations.append((it, int(done.sum())))
        idx = np.flatnonzero(active)
        Z = M(R[:, idx])
        # A-conjugate update of the search block, then re-orthonormalize
        beta = -linalg.cho_solve(cf, AP.T @ Z)
        P, dropped = _orth(Z + P @ beta, np.linalg.norm(Z))
        if dropped:
            deflations.append((it, dropped))
    if active.any():
        idx = np.flatnonzero(active)
        R[:, idx] = B[:, idx] - A(X[:, idx])
        matvecs += idx.size
        rel[idx] = _rel(np.linalg.norm(R[:, idx], axis=0), bnorm[idx])
    converged = rel <= opts.tol
    converged[bnorm == 0] = True
    rep = SolveReport(it, rel, converged, matvecs, deflations=deflations, history=history)
    return (X[:, 0] if vec else X), rep


def direct_solve(op, B):
    """Cholesky solve for dense operators; used for small verification problems."""
    B = np.asarray(B, dtype=float)
    cf = op.cholesky()
    X = linalg.cho_solve(cf, B)
    res = B - op.matvec(X)
    bn = np.linalg.norm(B, axis=0)
    rel = np.atleast_1d(_rel(np.linalg.norm(res, axis=0), bn))
    return X, SolveReport(1, rel, np.ones(rel.shape, bool), 1)


def solve(op, B, opts=None, require=True):
    """Dispatch to the configured method; raise on non-convergence when ``require``."""
    opts = opts or SolveOptions()
    B = np.asarray(B, dtype=float)
    if opts.method == "direct":
        if not hasattr(op, "cholesky"):
            raise ValueError("direct solves need a dense operator")
        X, rep = direct_solve(op, B)
    elif opts.method == "cg" or B.ndim == 1:
        if B.ndim == 1:
            X, rep = cg_solve(op, B, opts)
        else:
            cols, reps = zip(*(cg_solve(op, B[:, j], opts) for j in range(B.shape[1])))
            X = np.column_stack(cols)
            rep = SolveReport(
                max(r.iterations for r in reps),
                np.concatenate([r.residuals for r in reps]),
                np.concatenate([r.converged for r in reps]),
                sum(r.matvecs for r in reps),
            )
    else:
        X, rep = block_cg_solve(op, B, opts)
    if require and not rep.all_converged:
        raise ConvergenceError(
            f"linear solve did not converge in {rep.iterations} iterations "
            f"(max residual {np.max(rep.residuals):.3g})",
            rep,
        )
    return X, rep

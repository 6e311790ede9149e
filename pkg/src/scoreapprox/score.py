"""Stochastic score equations, information estimates and dense reference values.

With ``W_i = K^-1 K_i`` the exact score is
``0.5 Z'K^-1 K_i K^-1 Z - 0.5 tr(W_i)``.  The stochastic version replaces the
trace by ``(1/N) sum_j U_j' W_i U_j`` for +-1 probes ``U_j``; its covariance
is ``I + J / (4N)`` where ``I`` is the Fisher information and ``J`` depends
on the off-diagonal entries of the ``W_i``.
"""
from dataclasses import dataclass, field
import warnings

import numpy as np
from scipy import linalg

from .errors import NumericError
from .linsolve import SolveOptions, solve
from .probes import ProbeSet, enumerate_dependent_parts, enumerate_single_probe


@dataclass
class ScoreEval:
    g: np.ndarray
    quad: np.ndarray
    trace: np.ndarray
    KinvZ: np.ndarray
    report: object
    design: str
    N: int


@dataclass
class InfoEstimates:
    I_hat: np.ndarray
    J_hat: np.ndarray
    G_hat: np.ndarray
    N2: int
    N: int
    definite: bool = True
    reports: list = field(default_factory=list)

    def sd_fisher(self):
        return np.sqrt(np.diag(np.linalg.inv(self.I_hat)))

    def godambe_inverse(self):
        Iinv = np.linalg.inv(self.I_hat)
        return Iinv + Iinv @ self.J_hat @ Iinv / (4.0 * self.N)

    def sd_godambe(self):
        return np.sqrt(np.diag(self.godambe_inverse()))

    def sd_ratio(self):
        return self.sd_godambe() / self.sd_fisher()


def _U(probes):
    return probes.U if isinstance(probes, ProbeSet) else np.asarray(probes, dtype=float)


def eval_g(op, Z, probes, opts=None):
    """Stochastic score ``g`` at the operator's parameters.

    ``K^-1 [Z, U_1..U_N]`` comes from one block solve; the derivative
    products reuse the operator's shared transforms.
    """
    opts = opts or SolveOptions()
    U = _U(probes)
    N = U.shape[1]
    rhs = np.column_stack([Z, U])
    Y, rep = solve(op, rhs, opts)
    D = op.derivative_matvecs(Y)
    quad = 0.5 * D[:, :, 0] @ Y[:, 0]
    trace = np.einsum("pnj,nj->p", D[:, :, 1:], U) / N
    g = quad - 0.5 * trace
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite score value")
    design = probes.design if isinstance(probes, ProbeSet) else "given"
    return ScoreEval(g, quad, trace, Y[:, 0], rep, design, N)


def estimate_information(op, probes2, N, opts=None, symmetrize=True):
    """Stochastic Fisher (``I_hat``), ``J_hat`` and Godambe (``G_hat``) estimates.

    ``W_i U = K^-1 (K_i U)`` and ``W_i' U = K_i (K^-1 U)``.  ``J_hat`` is
    symmetrized before ``G_hat = I (I + J / 4N)^-1 I`` is assembled.
    """
    opts = opts or SolveOptions()
    U = _U(probes2)
    n, N2 = U.shape
    p = op.p
    V, rep1 = solve(op, U, opts)
    WtU = op.derivative_matvecs(V)
    KiU = op.derivative_matvecs(U)
    WU_flat, rep2 = solve(op, np.moveaxis(KiU, 0, 1).reshape(n, p * N2), opts)
    WU = np.moveaxis(WU_flat.reshape(n, p, N2), 1, 0)
    # U'W_i W_j U = (W_i' U) . (W_j U)
    A = np.einsum("ink,jnk->ij", WtU, WU) / N2
    B = np.einsum("ink,jnk->ij", WtU, WtU) / N2
    Dg = np.einsum("nk,ink->in", U, WU) / N2
    I_hat = 0.5 * A
    J_hat = A + B - 2.0 * Dg @ Dg.T
    if symmetrize:
        I_hat = 0.5 * (I_hat + I_hat.T)
        J_hat = 0.5 * (J_hat + J_hat.T)
    definite = bool(np.all(np.linalg.eigvalsh(0.5 * (I_hat + I_hat.T)) > 0))
    if not definite:
        warnings.warn("estimated Fisher information is not positive definite", RuntimeWarning)
        G_hat = np.full((p, p), np.nan)
    else:
        G_hat = I_hat @ np.linalg.solve(I_hat + J_hat / (4.0 * N), I_hat)
        G_hat = 0.5 * (G_hat + G_hat.T)
    return InfoEstimates(I_hat, J_hat, G_hat, N2, int(N), definite, [rep1, rep2])


def estimate_fisher(op, probes, opts=None):
    """``I_hat`` only; cheaper than :func:`estimate_information`."""
    opts = opts or SolveOptions()
    U = _U(probes)
    n, N2 = U.shape
    p = op.p
    V, _ = solve(op, U, opts)
    WtU = op.derivative_matvecs(V)
    KiU = op.derivative_matvecs(U)
    WU_flat, _ = solve(op, np.moveaxis(KiU, 0, 1).reshape(n, p * N2), opts)
    WU = np.moveaxis(WU_flat.reshape(n, p, N2), 1, 0)
    I_hat = 0.5 * np.einsum("ink,jnk->ij", WtU, WU) / N2
    return 0.5 * (I_hat + I_hat.T)


def efficiency_bound(kappa, N):
    """``(kappa + 1)^2 / (4 N kappa)``: worst-case relative inflation of ``cov{g}`` over ``I``."""
    if kappa < 1 or N < 1:
        raise ValueError("need kappa >= 1 and N >= 1")
    return (kappa + 1.0) ** 2 / (4.0 * N * kappa)


# ---------------------------------------------------------------------------
# dense reference values
# ---------------------------------------------------------------------------

def _chol(K):
    try:
        return linalg.cho_factor(np.asarray(K, dtype=float), lower=True)
    except linalg.LinAlgError as exc:
        raise NumericError(f"covariance not positive definite: {exc}") from exc


def dense_W(K, Ks):
    cf = _chol(K)
    return [linalg.cho_solve(cf, Ki) for Ki in Ks]


def exact_score(K, Ks, Z):
    cf = _chol(K)
    a = linalg.cho_solve(cf, Z)
    return np.array([0.5 * a @ Ki @ a - 0.5 * np.trace(linalg.cho_solve(cf, Ki)) for Ki in Ks])


def dense_loglik(K, Z):
    cf = _chol(K)
    a = linalg.cho_solve(cf, Z)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    return -0.5 * (Z @ a) - 0.5 * logdet - 0.5 * len(Z) * np.log(2 * np.pi)


def exact_fisher(K, Ks):
    W = dense_W(K, Ks)
    p = len(W)
    return np.array([[0.5 * np.sum(W[i] * W[j].T) for j in range(p)] for i in range(p)])


def exact_J(K, Ks):
    """``tr(W_i W_j) + tr(W_i W_j') - 2 sum_k (W_i)_kk (W_j)_kk``."""
    W = dense_W(K, Ks)
    p = len(W)
    J = np.empty((p, p))
    for i in range(p):
        for j in range(p):
            J[i, j] = (np.sum(W[i] * W[j].T) + np.sum(W[i] * W[j])
                       - 2.0 * np.diag(W[i]) @ np.diag(W[j]))
    return J


def symmetric_factor_matrices(K, Ks):
    """``L^-1 K_i L^-T`` for ``K = L L'``; the trace matrices of the symmetrized score."""
    L = np.linalg.cholesky(np.asarray(K, dtype=float))
    out = []
    for Ki in Ks:
        T = linalg.solve_triangular(L, Ki, lower=True)
        out.append(linalg.solve_triangular(L, T.T, lower=True).T)
    return out


def eval_h_symmetrized(K, Ks, Z, probes):
    """Score with the trace estimated through a symmetric factorization of ``K``."""
    U = _U(probes)
    cf = _chol(K)
    a = linalg.cho_solve(cf, Z)
    S = symmetric_factor_matrices(K, Ks)
    N = U.shape[1]
    return np.array([0.5 * a @ Ki @ a - 0.5 * np.einsum("nj,nm,mj->", U, Si, U) / N
                     for Ki, Si in zip(Ks, S)])


def eval_g_dense(K, Ks, Z, probes):
    U = _U(probes)
    cf = _chol(K)
    a = linalg.cho_solve(cf, Z)
    W = [linalg.cho_solve(cf, Ki) for Ki in Ks]
    N = U.shape[1]
    return np.array([0.5 * a @ Ki @ a - 0.5 * np.einsum("nj,nm,mj->", U, Wi, U) / N
                     for Ki, Wi in zip(Ks, W)])


# ---------------------------------------------------------------------------
# exact probe moments by enumeration
# ---------------------------------------------------------------------------

def probe_moments(mats, N, design="independent", assignment=None):
    """Exact mean and covariance of ``t_i = (1/N) sum_j U_j' A_i U_j``.

    Independent probes: one probe is enumerated and the covariance divided
    by ``N``.  Dependent probes: all outcomes of the design are enumerated.
    """
    A = np.stack([np.asarray(m, dtype=float) for m in mats])
    if design == "independent":
        U = enumerate_single_probe(A.shape[1])
        t = np.einsum("bn,inm,bm->bi", U, A, U)
        mean = t.mean(axis=0)
        dev = t - mean
        return mean, dev.T @ dev / t.shape[0] / N
    if assignment is None or assignment.N != N:
        raise ValueError("dependent moments need a matching block assignment")
    if N == 1:
        return probe_moments(mats, 1)
    p, n = A.shape[0], A.shape[1]
    A = 0.5 * (A + A.transpose(0, 2, 1))
    blocks, left = enumerate_dependent_parts(assignment)
    a, c = blocks.shape[0], left.shape[0]
    # t = t_block + t_left + 2 * cross, summed over every (block, leftover) pair
    flat = blocks.transpose(1, 0, 2).reshape(n, -1)
    A_flat = A @ flat
    t_block = (A_flat * flat).sum(axis=1).reshape(p, a, N).sum(axis=2)
    lo = assignment.leftover
    L = left.reshape(c, -1)
    t_left = np.einsum("cln,ilk,ckn->ic", left, A[:, lo][:, :, lo], left)
    cross = A_flat[:, lo].reshape(p, lo.size, a, N).transpose(0, 2, 1, 3).reshape(p, a, -1) @ L.T
    t = (t_block[:, :, None] + t_left[:, None, :] + 2 * cross).reshape(p, -1) / N
    count = t.shape[1]
    s1 = t.sum(axis=1)
    s2 = t @ t.T
    mean = s1 / count
    return mean, s2 / count - np.outer(mean, mean)


def enumerated_score_cov(K, Ks, N, design="independent", assignment=None, symmetrized=False):
    """Exact ``cov{g}`` (or ``cov{h}``) over data and probes together.

    The data part contributes the Fisher information and the probe part is
    independent of it, so ``cov = I + cov_U(t) / 4``.
    """
    mats = symmetric_factor_matrices(K, Ks) if symmetrized else dense_W(K, Ks)
    _, C = probe_moments(mats, N, design, assignment)
    return exact_fisher(K, Ks) + 0.25 * C


def trace_estimator_mean(K, Ks, N, design="independent", assignment=None, symmetrized=False):
    mats = symmetric_factor_matrices(K, Ks) if symmetrized else dense_W(K, Ks)
    return probe_moments(mats, N, design, assignment)[0]


def dependent_variance_gap(W, v, assignment):
    """``v'cov{g}v - v'cov{g_dep}v`` in closed form.

    Equals ``(1/4N) sum {sum_i v_i (W_i[k, l] + W_i[l, k])}^2`` over pairs
    ``k > l`` of distinct points sharing a block.
    """
    M = sum(vi * np.asarray(Wi, dtype=float) for vi, Wi in zip(v, W))
    S = M + M.T
    total = 0.0
    for members in assignment.members:
        sub = S[np.ix_(members, members)]
        total += np.sum(np.tril(sub, -1) ** 2)
    return total / (4.0 * assignment.N)

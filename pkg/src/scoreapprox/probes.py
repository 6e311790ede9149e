"""Random +-1 probe vectors and randomized trace/diagonal estimators.

Two designs are available.  ``independent`` draws i.i.d. Rademacher
entries.  ``dependent`` groups the filtered points into blocks of ``N`` and
fills block ``k`` of probe ``j`` with ``Y[j, k] * X_k * beta_j`` where the
``beta_j`` are orthogonal +-1 columns, ``X_k`` a random diagonal sign
matrix and ``Y[j, k]`` a random sign.  On any matrix that is block diagonal
with respect to the blocks, the dependent design recovers the trace exactly.
"""
from dataclasses import dataclass

import numpy as np
from scipy.linalg import hadamard

from .errors import DesignError, ShapeError


@dataclass(frozen=True)
class ProbeSet:
    U: np.ndarray
    design: str
    seed: int
    assignment: object = None

    @property
    def n(self):
        return self.U.shape[0]

    @property
    def N(self):
        return self.U.shape[1]


def _column_rng(seed, j):
    # one substream per probe column: adding columns never changes old ones
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(j)]))


def _signs(rng, size):
    return 2.0 * rng.integers(0, 2, size=size) - 1.0


def sample_independent_probes(n_f, N, seed):
    n_f, N = int(n_f), int(N)
    if n_f < 1 or N < 1:
        raise DesignError("probe dimensions must be positive")
    U = np.empty((n_f, N))
    for j in range(N):
        U[:, j] = _signs(_column_rng(seed, j), n_f)
    return ProbeSet(U, "independent", int(seed))


def is_power_of_two(N):
    return N >= 1 and (N & (N - 1)) == 0


def build_factorial_basis(N):
    """``N x N`` matrix of orthogonal +-1 columns (Sylvester construction)."""
    N = int(N)
    if not is_power_of_two(N):
        raise DesignError(f"dependent design needs N a power of two, got {N}")
    return hadamard(N).astype(float)


def sample_dependent_probes(assignment, basis, seed):
    N = assignment.N
    basis = np.asarray(basis, dtype=float)
    if basis.shape != (N, N):
        raise DesignError(f"basis is {basis.shape}, block size is {N}")
    if N == 1:
        # a single probe with random signs everywhere is the independent design
        ps = sample_independent_probes(assignment.n_f, 1, seed)
        return ProbeSet(ps.U, "dependent", int(seed), assignment)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2**31 - 1]))
    m = assignment.m
    X = _signs(rng, (m, N))
    Y = _signs(rng, (N, m))
    U = np.empty((assignment.n_f, N))
    # U[members[k, a], j] = Y[j, k] * X[k, a] * basis[a, j]
    U[assignment.members] = (X[:, :, None] * basis[None, :, :]) * Y.T[:, None, :]
    if assignment.leftover.size:
        U[assignment.leftover] = _signs(rng, (assignment.leftover.size, N))
    return ProbeSet(U, "dependent", int(seed), assignment)


def sample_probes(n_f, N, seed, design="independent", assignment=None):
    if design == "independent":
        return sample_independent_probes(n_f, N, seed)
    if design == "dependent":
        if assignment is None:
            from .gridfilter import consecutive_blocking

            assignment = consecutive_blocking(n_f, N)
        if assignment.N != N or assignment.n_f != n_f:
            raise DesignError("block assignment does not match probe dimensions")
        return sample_dependent_probes(assignment, build_factorial_basis(N), seed)
    raise DesignError(f"unknown probe design {design!r}")


def _apply(op, U):
    if hasattr(op, "matvec"):
        return op.matvec(U)
    if callable(op):
        return op(U)
    return np.asarray(op) @ U


def randomized_trace(op, probes):
    """``(1/N) sum_j U_j' A U_j``."""
    U = probes.U if isinstance(probes, ProbeSet) else np.asarray(probes, dtype=float)
    AU = _apply(op, U)
    if AU.shape != U.shape:
        raise ShapeError("operator and probes disagree in dimension")
    return float(np.einsum("ij,ij->", U, AU) / U.shape[1])


def randomized_diagonal(op, probes):
    """``(1/N) sum_j U_j * (A U_j)``."""
    U = probes.U if isinstance(probes, ProbeSet) else np.asarray(probes, dtype=float)
    AU = _apply(op, U)
    if AU.shape != U.shape:
        raise ShapeError("operator and probes disagree in dimension")
    return np.mean(U * AU, axis=1)


# ---------------------------------------------------------------------------
# exhaustive enumeration of probe outcomes (small instances only)
# ---------------------------------------------------------------------------

def _all_signs(k):
    """All ``2^k`` sign vectors as rows."""
    if k == 0:
        return np.ones((1, 0))
    bits = (np.arange(2 ** k)[:, None] >> np.arange(k)[None, :]) & 1
    return 2.0 * bits - 1.0


def enumerate_single_probe(n_f):
    """All ``2^n_f`` equally likely Rademacher vectors, shape ``(2^n_f, n_f)``."""
    return _all_signs(int(n_f))


def enumerate_dependent_parts(assignment):
    """Block outcomes and leftover outcomes of the dependent design, separately.

    Returns ``(blocks, left)``: ``blocks`` has shape ``(a, n_f, N)`` with the
    leftover rows zero, ``left`` has shape ``(c, n_left, N)``.  Every pairing
    of one block outcome with one leftover outcome is an equally likely draw.
    Flipping both ``X_k`` and the column ``Y[:, k]`` leaves the probes
    unchanged, so ``Y[0, k] = +1`` is fixed.
    """
    N, m = assignment.N, assignment.m
    n_left = assignment.leftover.size
    k_y = (N - 1) * m
    k_block = m * N + k_y
    if k_block + n_left * N > 26:
        raise DesignError(f"{2 ** (k_block + n_left * N)} outcomes is too many to enumerate")
    signs = _all_signs(k_block)
    a = signs.shape[0]
    X = signs[:, : m * N].reshape(a, m, N)
    Y = np.ones((a, N, m))
    Y[:, 1:, :] = signs[:, m * N:].reshape(a, N - 1, m)
    blocks = np.zeros((a, assignment.n_f, N))
    basis = build_factorial_basis(N)
    blocks[:, assignment.members] = X[:, :, :, None] * basis[None, None] * np.swapaxes(Y, 1, 2)[:, :, None, :]
    left = _all_signs(n_left * N).reshape(2 ** (n_left * N), n_left, N)
    return blocks, left


def enumerate_dependent(assignment, batch=4096):
    """Yield every equally likely dependent probe matrix, in batches.

    Each batch has shape ``(b, n_f, N)``.  All outcomes are equally likely, so
    a plain average is the expectation.
    """
    if assignment.N == 1:
        # the N = 1 dependent design is the independent one
        U = enumerate_single_probe(assignment.n_f)[:, :, None]
        for start in range(0, U.shape[0], batch):
            yield U[start:start + batch]
        return
    blocks, left = enumerate_dependent_parts(assignment)
    step = max(1, batch // left.shape[0])
    for start in range(0, blocks.shape[0], step):
        U = np.repeat(blocks[start:start + step], left.shape[0], axis=0)
        if left.shape[1]:
            U[:, assignment.leftover] = np.tile(left, (U.shape[0] // left.shape[0], 1, 1))
        yield U

import numpy as np
import pytest
from hypothesis import given, strategies as st

from scoreapprox.errors import NumericError, ShapeError
from scoreapprox.gridfilter import (
    build_disc_occluded_grid,
    build_filter_plan,
    filter_matrix,
    full_grid,
    spacing_for_extent,
)
from scoreapprox.kernels import (
    MaternModel,
    MaternParams,
    PowerLawModel,
    PowerLawParams,
    SpaceTimeModel,
    SpaceTimeParams,
)
from scoreapprox.operators import (
    SpaceTimeGrid,
    bench_matvec,
    build_operator,
    dense_matrices,
    simulate_gp,
)

PL = PowerLawModel(PowerLawParams(1.5, (7.0, 10.0)))


def disc(m, radius=15.0):
    return build_disc_occluded_grid((m, m), spacing_for_extent((m, m)), (40.0, 60.0), radius)


def lanczos_min(op, k, rng):
    q = rng.standard_normal(op.n)
    Q = [q / np.linalg.norm(q)]
    a, b = [], []
    for j in range(k):
        w = op.matvec(Q[-1])
        a.append(Q[-1] @ w)
        for v in Q:
            w -= (v @ w) * v
        nb = np.linalg.norm(w)
        if nb < 1e-12 or j == k - 1:
            break
        b.append(nb)
        Q.append(w / nb)
    T = np.diag(a) + np.diag(b, 1) + np.diag(b, -1)
    return np.linalg.eigvalsh(T)[0]


class TestBackends:
    def test_circulant_full_grid(self):
        grid = full_grid((8, 8), 100.0 / 7)
        plan = build_filter_plan(grid, 1)
        dense = build_operator(PL, grid, plan, "dense")
        circ = build_operator(PL, grid, plan, "circulant")
        for which in (None, 0, 1, 2):
            assert np.abs(circ.to_dense(which) - dense.to_dense(which)).max() < 1e-10

    @pytest.mark.parametrize("tau", [0, 1, 2])
    def test_circulant_occluded(self, tau, rng):
        model = PowerLawModel(PowerLawParams(1.2 if tau == 0 else 2.5, (7.0, 10.0)))
        if tau == 0:
            model = MaternModel(MaternParams(1.0, 1.0, 10.0), d=2)
        grid = disc(18)
        plan = build_filter_plan(grid, tau)
        assert plan.n_f <= 500
        dense = build_operator(model, grid, plan, "dense")
        circ = build_operator(model, grid, plan, "circulant")
        x = rng.standard_normal((plan.n_f, 4))
        assert np.abs(circ.matvec(x) - dense.matvec(x)).max() < 1e-9
        np.testing.assert_allclose(circ.derivative_matvecs(x), dense.derivative_matvecs(x),
                                   atol=1e-9)

    def test_short_range_matern_is_identity(self, rng):
        grid = full_grid((10, 10))
        op = build_operator(MaternModel(MaternParams(0.5, 1.0, 1e-4), d=2), grid)
        x = rng.standard_normal(op.n)
        np.testing.assert_allclose(op.matvec(x), x, atol=1e-12)

    def test_spacetime_block_circulant(self, rng):
        stg = SpaceTimeGrid(np.array([-2.0, 2.0]), 0.0, 12.0, 4, 3)
        model = SpaceTimeModel(SpaceTimeParams(1.3e-3, 1.9, 11.5, -8.2))
        dense = build_operator(model, stg, backend="dense")
        bc = build_operator(model, stg, backend="block-circulant")
        assert bc.n == 24
        for which in (None, 0, 1, 2, 3):
            assert np.abs(bc.to_dense(which) - dense.to_dense(which)).max() < 1e-10

    def test_dense_matches_filter_product(self):
        grid = disc(14, 20.0)
        plan = build_filter_plan(grid, 1)
        K0, K0s = dense_matrices(PL, grid, build_filter_plan(grid, 0))
        F = filter_matrix(grid, plan).toarray()
        K, Ks = dense_matrices(PL, grid, plan)
        scale = np.abs(K).max()
        np.testing.assert_allclose(K, F @ K0 @ F.T, atol=1e-10 * scale)
        for A, A0 in zip(Ks, K0s):
            np.testing.assert_allclose(A, F @ A0 @ F.T, atol=1e-9 * np.abs(A).max())


@pytest.fixture(scope="module")
def op():
    grid = disc(16)
    return build_operator(PL, grid, build_filter_plan(grid, 1), "circulant")


class TestMatvec:
    def test_zero(self, op):
        assert np.all(op.matvec(np.zeros(op.n)) == 0)

    @given(st.integers(0, 2**31))
    def test_symmetric(self, op, seed):
        u, v = np.random.default_rng(seed).standard_normal((2, op.n))
        for which in (None, 0, 1, 2):
            a = op.matvec(u, which) @ v
            b = u @ op.matvec(v, which)
            assert abs(a - b) <= 1e-10 * (abs(a) + np.linalg.norm(op.matvec(u, which)) * np.linalg.norm(v))

    def test_derivative_fd(self, op, rng):
        grid = disc(16)
        plan = build_filter_plan(grid, 1)
        x = rng.standard_normal(op.n)
        theta = op.theta
        dK = op.derivative_matvecs(x)
        for i in range(op.p):
            h = 1e-5 * abs(theta[i])
            tp, tm = theta.copy(), theta.copy()
            tp[i] += h
            tm[i] -= h
            fp = build_operator(PL.with_theta(tp), grid, plan).matvec(x)
            fm = build_operator(PL.with_theta(tm), grid, plan).matvec(x)
            fd = (fp - fm) / (2 * h)
            assert np.linalg.norm(dK[i] - fd) <= 1e-5 * np.linalg.norm(fd)

    def test_errors(self, op):
        with pytest.raises(NumericError):
            op.matvec(np.full(op.n, np.nan))
        with pytest.raises(ShapeError):
            op.matvec(np.zeros(op.n + 1))

    def test_positive_definite(self, op, rng):
        assert lanczos_min(op, 50, rng) > 0


class TestSimulation:
    def test_mean_and_variance(self):
        grid = disc(12, 15.0)
        plan = build_filter_plan(grid, 1)
        R = 200
        draws = simulate_gp(PL, grid, plan, seed=3, size=R)
        K, _ = dense_matrices(PL, grid, plan)
        k = plan.n_f // 2
        sd = np.sqrt(K[k, k])
        assert abs(draws[:, k].mean()) < 4 * sd / np.sqrt(R)
        var = (draws[:, k] ** 2).mean()
        assert abs(var - K[k, k]) < 3 * K[k, k] * np.sqrt(2 / R)

    def test_covariance_overall(self):
        grid = disc(10, 10.0)
        plan = build_filter_plan(grid, 1)
        draws = simulate_gp(PL, grid, plan, seed=5, size=4000)
        K, _ = dense_matrices(PL, grid, plan)
        emp = draws.T @ draws / 4000
        assert np.abs(emp - K).max() < 0.15 * K.diagonal().max()

    def test_deterministic(self):
        grid = disc(12)
        plan = build_filter_plan(grid, 1)
        a = simulate_gp(PL, grid, plan, seed=11)
        b = simulate_gp(PL, grid, plan, seed=11)
        c = simulate_gp(PL, grid, plan, seed=12)
        assert a.shape == (plan.n_f,)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_spacetime(self):
        stg = SpaceTimeGrid(np.array([-2.0, 0.0, 2.0]), 0.0, 12.0, 5, 4)
        model = SpaceTimeModel(SpaceTimeParams(1.0, 1.9, 11.5, -8.2))
        draws = simulate_gp(model, stg, seed=1, size=3000)
        K, _ = dense_matrices(model, stg)
        emp = draws.T @ draws / 3000
        assert np.abs(emp - K).max() < 0.15


def test_bench_rows():
    rows = bench_matvec([(16, 16), (24, 24)], backends=("circulant", "dense"), repeats=2)
    assert len(rows) == 4
    for n, backend, sec in rows:
        assert n > 0 and backend in ("circulant", "dense") and sec > 0

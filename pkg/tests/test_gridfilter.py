import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from scoreapprox.errors import GeometryError, ShapeError
from scoreapprox.gridfilter import (
    apply_laplacian,
    apply_laplacian_adjoint,
    build_disc_occluded_grid,
    build_filter_plan,
    choose_tau,
    consecutive_blocking,
    filter_matrix,
    full_grid,
    spacing_for_extent,
    zigzag_blocking,
)
from scoreapprox.kernels import PowerLawModel, PowerLawParams
from scoreapprox.operators import dense_matrices


def disc_grid(m=32, radius=10.0):
    return build_disc_occluded_grid((m, m), spacing_for_extent((m, m)), (40.0, 60.0), radius)


class TestGrid:
    def test_disc_count(self):
        grid = disc_grid()
        h = 100.0 / 31
        removed = sum(
            1 for i in range(32) for j in range(32)
            if math.hypot(i * h - 40.0, j * h - 60.0) < 10.0
        )
        assert removed > 0
        assert grid.n == 1024 - removed

    def test_zero_radius_is_full(self):
        assert disc_grid(radius=0.0).n == 1024

    def test_huge_radius(self):
        with pytest.raises(GeometryError):
            disc_grid(radius=1000.0)

    def test_index_maps_inverse(self):
        grid = disc_grid()
        assert np.array_equal(grid.full_to_obs[grid.observed], np.arange(grid.n))
        assert np.all(grid.full_to_obs[~grid.mask.ravel()] == -1)

    def test_describe(self):
        info = disc_grid().describe()
        assert info["dims"] == "32x32"
        assert info["occlusion.radius"] == "10"


class TestLaplacian:
    @pytest.mark.parametrize("tau", [1, 2])
    def test_constant_and_linear(self, tau):
        grid = disc_grid(16)
        plan = build_filter_plan(grid, tau)
        xy = grid.coords()
        for field in (np.full(grid.n, 3.0), 2.0 * xy[:, 0] - 0.5 * xy[:, 1] + 1.0):
            np.testing.assert_allclose(apply_laplacian(grid, plan, field), 0.0, atol=1e-10)

    def test_second_difference(self):
        grid = full_grid((3,))
        plan = build_filter_plan(grid, 1)
        out = apply_laplacian(grid, plan, np.array([0.0, 1.0, 4.0]))
        assert out.tolist() == [2.0]

    def test_tau_zero_identity(self):
        grid = disc_grid(10)
        plan = build_filter_plan(grid, 0)
        assert plan.n_f == grid.n
        x = np.arange(grid.n, dtype=float)
        assert np.array_equal(apply_laplacian(grid, plan, x), x)

    def test_retained_neighbors_observed(self):
        grid = disc_grid(20)
        for tau in (1, 2):
            plan = build_filter_plan(grid, tau)
            ij = grid.multi_index(plan.retained)
            for off in np.ndindex(*(2 * tau + 1,) * 2):
                o = np.array(off) - tau
                if np.abs(o).sum() > tau:
                    continue
                nb = ij + o
                assert np.all((nb >= 0) & (nb < 20))
                assert grid.mask[nb[:, 0], nb[:, 1]].all()

    def test_shape_error(self):
        grid = disc_grid(8)
        plan = build_filter_plan(grid, 1)
        with pytest.raises(ShapeError):
            apply_laplacian(grid, plan, np.zeros(grid.n + 1))

    @given(st.integers(0, 2**31), st.floats(-5, 5), st.floats(-5, 5))
    def test_linear(self, seed, a, b):
        grid = disc_grid(12, 15.0)
        plan = build_filter_plan(grid, 1)
        rng = np.random.default_rng(seed)
        x, y = rng.standard_normal((2, grid.n))
        lhs = apply_laplacian(grid, plan, a * x + b * y)
        rhs = a * apply_laplacian(grid, plan, x) + b * apply_laplacian(grid, plan, y)
        np.testing.assert_allclose(lhs, rhs, atol=1e-11 * (1 + abs(a) + abs(b)))

    @pytest.mark.parametrize("use_numba", [False, True])
    def test_matrix_and_adjoint(self, use_numba, rng):
        grid = disc_grid(14, 20.0)
        plan = build_filter_plan(grid, 2)
        F = filter_matrix(grid, plan).toarray()
        x = rng.standard_normal((grid.n, 3))
        y = rng.standard_normal((plan.n_f, 3))
        np.testing.assert_allclose(apply_laplacian(grid, plan, x, use_numba), F @ x, atol=1e-10)
        np.testing.assert_allclose(apply_laplacian_adjoint(grid, plan, y, use_numba), F.T @ y,
                                   atol=1e-10)

    @pytest.mark.parametrize("tau", [1, 2])
    def test_filtered_covariance(self, tau):
        # n <= 400; unfiltered covariance from the raw kernel, filtered from the lag table
        grid = disc_grid(16, 20.0)
        plan = build_filter_plan(grid, tau)
        model = PowerLawModel(PowerLawParams(1.5, (7.0, 10.0)))
        raw = build_filter_plan(grid, 0)
        K0, _ = dense_matrices(model, grid, raw)
        F = filter_matrix(grid, plan).toarray()
        Kf, _ = dense_matrices(model, grid, plan)
        np.testing.assert_allclose(Kf, F @ K0 @ F.T, rtol=1e-9, atol=1e-9 * np.abs(Kf).max())


@pytest.mark.parametrize("alpha,d,tau", [(2.0, 2, 1), (1.5, 2, 1), (4.0, 1, 2), (3.0, 2, 2)])
def test_choose_tau(alpha, d, tau):
    assert choose_tau(alpha, d) == tau


class TestBlocking:
    def test_exact_division(self):
        grid = full_grid((4, 4))
        asg = zigzag_blocking(grid, build_filter_plan(grid, 0), 4)
        assert asg.m == 4 and asg.leftover.size == 0

    def test_remainder(self):
        grid = full_grid((4, 4))
        asg = zigzag_blocking(grid, build_filter_plan(grid, 0), 5)
        assert asg.m == 3 and asg.leftover.size == 1

    def test_zigzag_order(self):
        grid = full_grid((4, 4))
        asg = zigzag_blocking(grid, build_filter_plan(grid, 0), 4)
        ij = grid.multi_index(asg.members.ravel())
        # bottom stripe y in {0,1} left to right, next stripe right to left
        assert ij[:8].tolist() == [[0, 0], [0, 1], [1, 0], [1, 1], [2, 0], [2, 1], [3, 0], [3, 1]]
        assert ij[8:12].tolist() == [[3, 2], [3, 3], [2, 2], [2, 3]]

    def test_too_few_points(self):
        asg = consecutive_blocking(3, 5)
        assert asg.m == 0 and asg.leftover.tolist() == [0, 1, 2]

    def test_block_diameter(self):
        grid = disc_grid(32)
        plan = build_filter_plan(grid, 1)
        N = 16
        asg = zigzag_blocking(grid, plan, N)
        ij = grid.multi_index(plan.retained)
        width = math.isqrt(N)
        for members in asg.members:
            pts = ij[members]
            diam = (pts.max(0) - pts.min(0)).max()
            assert diam <= width + N

    @given(st.integers(1, 40), st.integers(5, 20), st.floats(0, 30))
    def test_partition(self, N, m, radius):
        grid = build_disc_occluded_grid((m, m), spacing_for_extent((m, m)), (50.0, 50.0), radius)
        try:
            plan = build_filter_plan(grid, 1)
        except GeometryError:
            assume(False)
        asg = zigzag_blocking(grid, plan, N)
        seen = np.concatenate([asg.members.ravel(), asg.leftover])
        assert np.array_equal(np.sort(seen), np.arange(plan.n_f))
        assert asg.members.shape == (plan.n_f // N, N)
        for b, members in enumerate(asg.members):
            assert np.all(asg.block_id[members] == b)
        assert np.all(asg.block_id[asg.leftover] == -1)

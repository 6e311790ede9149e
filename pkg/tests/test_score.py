import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_spd, random_sym
from scoreapprox.bounds import powerlaw_line_instance
from scoreapprox.gridfilter import build_filter_plan, consecutive_blocking, full_grid
from scoreapprox.kernels import PowerLawModel, PowerLawParams
from scoreapprox.operators import DenseOperator, build_operator, dense_matrices
from scoreapprox.probes import enumerate_single_probe, sample_probes
from scoreapprox.score import (
    dense_W,
    dense_loglik,
    dependent_variance_gap,
    efficiency_bound,
    enumerated_score_cov,
    estimate_information,
    eval_g,
    eval_g_dense,
    eval_h_symmetrized,
    exact_fisher,
    exact_J,
    exact_score,
    trace_estimator_mean,
)

LINE = full_grid((12,), 100.0 / 11)
LINE_PLAN = build_filter_plan(LINE, 1)


def line_matrices(theta):
    return dense_matrices(PowerLawModel.from_theta(np.asarray(theta, float)), LINE, LINE_PLAN)


def cho_draws(K, size, seed):
    L = np.linalg.cholesky(K)
    return (L @ np.random.default_rng(seed).standard_normal((K.shape[0], size))).T


class TestEvalG:
    def test_diagonal_single_probe_is_exact(self, rng):
        K = np.diag(rng.uniform(1, 3, 20))
        Ks = [np.diag(rng.uniform(0.5, 1, 20))]
        Z = rng.standard_normal(20)
        op = DenseOperator(K, Ks)
        for seed in range(5):
            ps = sample_probes(20, 1, seed)
            ev = eval_g(op, Z, ps)
            np.testing.assert_allclose(ev.g, exact_score(K, Ks, Z), rtol=1e-9)

    def test_matches_dense_formula(self, rng):
        K, Ks = line_matrices((1.5, 10.0))
        Z = rng.standard_normal(K.shape[0])
        ps = sample_probes(K.shape[0], 4, 3)
        ev = eval_g(DenseOperator(K, Ks), Z, ps)
        np.testing.assert_allclose(ev.g, eval_g_dense(K, Ks, Z, ps), rtol=1e-8)
        assert ev.report.all_converged

    def test_circulant_backend(self):
        grid = full_grid((10, 10), 100 / 9)
        plan = build_filter_plan(grid, 1)
        model = PowerLawModel(PowerLawParams(1.5, (7.0, 10.0)))
        Z = np.random.default_rng(1).standard_normal(plan.n_f)
        ps = sample_probes(plan.n_f, 8, 2)
        a = eval_g(build_operator(model, grid, plan, "circulant"), Z, ps).g
        b = eval_g(build_operator(model, grid, plan, "dense"), Z, ps).g
        np.testing.assert_allclose(a, b, rtol=1e-7)

    @pytest.mark.parametrize("design", ["independent", "dependent"])
    def test_enumerated_mean_is_exact(self, design, rng):
        K, Ks = line_matrices((1.5, 10.0))
        n = K.shape[0]
        Z = rng.standard_normal(n)
        N = 2
        asg = consecutive_blocking(n, N) if design == "dependent" else None
        trace = trace_estimator_mean(K, Ks, N, design, asg)
        W = dense_W(K, Ks)
        np.testing.assert_allclose(trace, [np.trace(w) for w in W], atol=1e-10)
        a = np.linalg.solve(K, Z)
        g_mean = np.array([0.5 * a @ Ki @ a for Ki in Ks]) - 0.5 * trace
        np.testing.assert_allclose(g_mean, exact_score(K, Ks, Z), atol=1e-10)

    def test_unbiased_monte_carlo(self):
        theta = (1.5, 10.0)
        K, Ks = line_matrices(theta)
        R = 500
        Zs = cho_draws(K, R, 4)
        gs = np.array([eval_g_dense(K, Ks, Zs[r], sample_probes(K.shape[0], 2, r)) for r in range(R)])
        se = gs.std(axis=0, ddof=1) / np.sqrt(R)
        assert np.all(np.abs(gs.mean(axis=0)) < 4 * se)

    def test_expected_jacobian(self):
        theta = np.array([1.5, 10.0])
        K, Ks = line_matrices(theta)
        I = exact_fisher(K, Ks)
        R = 300
        Zs = cho_draws(K, R, 8)
        jac = np.empty((R, 2, 2))
        for r in range(R):
            ps = sample_probes(K.shape[0], 2, 1000 + r)
            for j in range(2):
                h = 1e-5 * theta[j]
                tp, tm = theta.copy(), theta.copy()
                tp[j] += h
                tm[j] -= h
                gp = eval_g_dense(*line_matrices(tp), Zs[r], ps)
                gm = eval_g_dense(*line_matrices(tm), Zs[r], ps)
                jac[r, :, j] = (gp - gm) / (2 * h)
        se = jac.std(axis=0, ddof=1) / np.sqrt(R)
        assert np.all(np.abs(jac.mean(axis=0) + I) < 3 * se + 1e-8)


class TestExactScore:
    def test_identity(self, rng):
        Z = rng.standard_normal(9)
        I9 = np.eye(9)
        assert exact_score(I9, [I9], Z)[0] == pytest.approx(0.5 * Z @ Z - 4.5)

    def test_loglik_gradient(self, rng):
        theta = np.array([1.3, 8.0])
        K, Ks = line_matrices(theta)
        Z = rng.standard_normal(K.shape[0])
        g = exact_score(K, Ks, Z)
        for i in range(2):
            h = 1e-5 * theta[i]
            tp, tm = theta.copy(), theta.copy()
            tp[i] += h
            tm[i] -= h
            fd = (dense_loglik(line_matrices(tp)[0], Z) - dense_loglik(line_matrices(tm)[0], Z)) / (2 * h)
            assert g[i] == pytest.approx(fd, rel=1e-5, abs=1e-8)

    def test_vanishes_at_mle(self, rng):
        # scale family K = s K0 has the closed-form maximizer s = Z'K0^-1 Z / n
        K0 = random_spd(rng, 15)
        Z = rng.standard_normal(15)
        s_hat = Z @ np.linalg.solve(K0, Z) / 15
        assert abs(exact_score(s_hat * K0, [K0], Z)[0]) < 1e-6
        from scipy.optimize import minimize_scalar
        res = minimize_scalar(lambda t: -dense_loglik(np.exp(t) * K0, Z), bracket=(-2, 2), tol=1e-12)
        assert np.exp(res.x) == pytest.approx(s_hat, rel=1e-6)


class TestSymmetrized:
    def test_diagonal_matches_eval_g(self, rng):
        K = np.diag(rng.uniform(1, 3, 10))
        Ks = [np.diag(rng.standard_normal(10)), np.diag(rng.standard_normal(10))]
        Z = rng.standard_normal(10)
        ps = sample_probes(10, 3, 1)
        np.testing.assert_allclose(eval_h_symmetrized(K, Ks, Z, ps), eval_g_dense(K, Ks, Z, ps),
                                   rtol=1e-12)

    @pytest.mark.parametrize("N", [1, 2, 4])
    def test_covariance_bound(self, N):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            K = random_spd(rng, 8)
            Ks = [random_sym(rng, 8) for _ in range(2)]
            C = enumerated_score_cov(K, Ks, N, symmetrized=True)
            I = exact_fisher(K, Ks)
            assert np.linalg.eigvalsh((1 + 1 / N) * I - C).min() >= -1e-10

    def test_enumerated_mean(self, rng):
        K = random_spd(rng, 8)
        Ks = [random_sym(rng, 8)]
        Z = rng.standard_normal(8)
        U = enumerate_single_probe(8)
        hs = np.array([eval_h_symmetrized(K, Ks, Z, u[:, None]) for u in U])
        np.testing.assert_allclose(hs.mean(axis=0), exact_score(K, Ks, Z), atol=1e-10)


class TestInformation:
    def test_enumerated_fisher(self, rng):
        K = random_spd(rng, 8)
        Ks = [random_sym(rng, 8) for _ in range(3)]
        U = enumerate_single_probe(8).T
        info = estimate_information(DenseOperator(K, Ks), U, N=4)
        np.testing.assert_allclose(info.I_hat, exact_fisher(K, Ks), atol=1e-10)

    def test_diagonal_J_zero(self, rng):
        K = np.diag(rng.uniform(1, 3, 12))
        Ks = [np.diag(rng.standard_normal(12)) for _ in range(2)]
        info = estimate_information(DenseOperator(K, Ks), sample_probes(12, 5, 0), N=4)
        assert np.abs(info.J_hat).max() < 1e-12
        np.testing.assert_allclose(info.sd_ratio(), 1.0, atol=1e-12)
        assert np.abs(exact_J(K, Ks)).max() < 1e-12

    def test_godambe_assembly(self, rng):
        K, Ks = line_matrices((1.5, 10.0))
        info = estimate_information(DenseOperator(K, Ks), sample_probes(K.shape[0], 50, 3), N=8)
        I, J = info.I_hat, info.J_hat
        np.testing.assert_allclose(info.G_hat, I @ np.linalg.solve(I + J / 32, I), rtol=1e-10)
        np.testing.assert_allclose(np.linalg.inv(info.G_hat), info.godambe_inverse(), rtol=1e-8)
        assert np.allclose(I, I.T) and np.all(np.diag(I) > 0)
        assert np.all(info.sd_ratio() >= 1 - 1e-12)


@pytest.mark.parametrize("kappa,N,value", [(5, 180, 0.01), (5, 18, 0.1), (1, 1, 1.0)])
def test_efficiency_bound(kappa, N, value):
    assert efficiency_bound(kappa, N) == value


class TestIdentities:
    @given(st.integers(0, 2**31), st.sampled_from([1, 2, 4]))
    def test_decomposition_and_bound(self, seed, N):
        rng = np.random.default_rng(seed)
        K = random_spd(rng, 8, 20.0)
        Ks = [random_sym(rng, 8) for _ in range(2)]
        C = enumerated_score_cov(K, Ks, N)
        I = exact_fisher(K, Ks)
        np.testing.assert_allclose(C, I + exact_J(K, Ks) / (4 * N), atol=1e-10)
        w = np.linalg.eigvalsh(K)
        bound = efficiency_bound(w[-1] / w[0], N)
        assert np.linalg.eigvalsh(I * (1 + bound) - C).min() >= -1e-9

    @given(st.integers(0, 2**31), st.sampled_from([2, 4]))
    def test_dependent_gap(self, seed, N):
        rng = np.random.default_rng(seed)
        K = random_spd(rng, 8)
        Ks = [random_sym(rng, 8) for _ in range(2)]
        asg = consecutive_blocking(8, N)
        C = enumerated_score_cov(K, Ks, N)
        Cd = enumerated_score_cov(K, Ks, N, "dependent", asg)
        W = dense_W(K, Ks)
        v = rng.standard_normal(2)
        assert v @ (C - Cd) @ v == pytest.approx(dependent_variance_gap(W, v, asg), abs=1e-10)
        assert np.linalg.eigvalsh(C - Cd).min() >= -1e-10
        # Godambe ordering: with E g' = -I for both designs, G = I C^-1 I
        I = exact_fisher(K, Ks)
        Gd = I @ np.linalg.solve(Cd, I)
        G = I @ np.linalg.solve(C, I)
        assert np.linalg.eigvalsh(Gd - G).min() >= -1e-9

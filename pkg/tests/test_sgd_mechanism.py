import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from seqmi.errors import CovarianceError
from seqmi.mean_mechanism import InsertionSpec, MeanTrace, recover_batch_mean
from seqmi.mi_tests import GradientStats, semi_sgd, semi_star_uni
from seqmi.sgd_mechanism import (
    LinRegProblem,
    LogRegProblem,
    QuadraticMeanProblem,
    SgdConfig,
    clip_gradients,
    detectability,
    detectability_at_optimum,
    estimate_grad_stats,
    linreg_grad_stats,
    perturbed_start,
    run_dpsgd,
    run_sgd,
    select_target,
    target_gradient,
    write_param_trace_csv,
)
from seqmi.stats_core import RngStream, as_generator, mahalanobis_sq

NO_INSERT = InsertionSpec(0, 1, np.zeros(1))


def linreg(d=5, eps2=1.0):
    return LinRegProblem(np.ones(d), np.eye(d), eps2)


def no_insert(problem):
    return InsertionSpec(0, 1, np.zeros(problem.point_dim))


class TestRunSgd:
    def test_zero_gradient_constant(self):
        problem = QuadraticMeanProblem([1.0, -2.0], np.zeros((2, 2)))
        config = SgdConfig(T=5, batch_size=4, learning_rate=0.3, theta0=[1.0, -2.0])
        trace = run_sgd(problem, config, no_insert(problem), RngStream(0))
        assert np.array_equal(trace.thetas, np.tile([1.0, -2.0], (6, 1)))

    def test_running_mean_recursion(self):
        mu, n, T = 0.7, 8, 12
        problem = QuadraticMeanProblem([mu], [[2.0]])
        config = SgdConfig(T=T, batch_size=n, learning_rate="inverse_time", theta0=[0.0])
        stream = RngStream(3, 1)
        trace = run_sgd(problem, config, NO_INSERT, stream)
        rng = as_generator(stream, 0)
        batches = np.array([problem.sample(rng, n)[:, 0] for _ in range(T)])
        running = np.cumsum(batches.sum(axis=1)) / (n * np.arange(1, T + 1))
        assert np.max(np.abs(trace.thetas[1:, 0] - running)) <= 1e-10

    def test_insertion_enters_batch(self):
        problem = QuadraticMeanProblem([0.0], [[1.0]])
        config = SgdConfig(T=3, batch_size=4, learning_rate="inverse_time", theta0=[0.0])
        plain = run_sgd(problem, config, NO_INSERT, RngStream(2))
        ins = run_sgd(problem, config, InsertionSpec(1, 2, [50.0], J=3), RngStream(2))
        assert np.array_equal(plain.thetas[:2], ins.thetas[:2])
        assert ins.thetas[2, 0] > plain.thetas[2, 0] + 5

    def test_config_errors(self):
        with pytest.raises(ValueError):
            SgdConfig(T=2, batch_size=4, learning_rate=0.0, theta0=[0.0])
        with pytest.raises(ValueError):
            SgdConfig(T=2, batch_size=4, learning_rate=[0.1, -0.1], theta0=[0.0])
        with pytest.raises(ValueError):
            SgdConfig(T=2, batch_size=1, learning_rate=0.1, theta0=[0.0])
        with pytest.raises(ValueError):
            SgdConfig(T=2, batch_size=4, learning_rate=0.1, theta0=[0.0], clip=0.0)

    @staticmethod
    def _standardized_increments(problem, theta0, rounds=10_000, T=10, n=50, eta=0.05):
        config = SgdConfig(T=T, batch_size=n, learning_rate=eta, theta0=theta0)
        z = np.empty((rounds, problem.dim))
        for r in range(rounds):
            trace = run_sgd(problem, config, no_insert(problem), RngStream(7, r))
            t = 1 + r % T
            gs = linreg_grad_stats(trace.thetas[t - 1], problem)
            g = (trace.thetas[t - 1] - trace.thetas[t]) / eta
            z[r] = np.linalg.solve(gs.chol, (g - gs.mu_g) * math.sqrt(n))
        return z

    def test_gaussian_update_model(self):
        problem = linreg(5)
        theta0 = perturbed_start(problem.theta_star, RngStream(7, 2**64 - 1).generator())
        z = self._standardized_increments(problem, theta0)
        rounds = z.shape[0]
        assert np.all(np.abs(z.mean(axis=0)) < 4 / math.sqrt(rounds))
        assert np.all(np.abs(np.cov(z, rowvar=False) - np.eye(5)) < 0.06)
        # off the optimum per-sample gradients are skewed; the batch keeps skew / sqrt(n)
        g = problem.grads(theta0, problem.sample(np.random.default_rng(1), 10**6))
        gs = linreg_grad_stats(theta0, problem)
        w = np.linalg.solve(gs.chol, (g - gs.mu_g).T).T
        predicted = scipy.stats.skew(w, axis=0) / math.sqrt(50)
        assert np.all(np.abs(scipy.stats.skew(z, axis=0) - predicted) < 4 * math.sqrt(6 / rounds))

    def test_gaussian_update_at_optimum(self):
        problem = linreg(5)
        z = self._standardized_increments(problem, problem.theta_star, T=1)
        for k in range(5):
            assert scipy.stats.kstest(z[:, k], "norm").pvalue > 1e-3


class TestDpSgd:
    def test_degenerate_privacy_matches_sgd(self):
        problem = linreg(3)
        config = SgdConfig(T=6, batch_size=10, learning_rate=0.1, theta0=np.zeros(3), clip=math.inf)
        a = run_dpsgd(problem, config, no_insert(problem), RngStream(4))
        b = run_sgd(problem, config, no_insert(problem), RngStream(4))
        assert np.array_equal(a.thetas, b.thetas)

    def test_all_clipped_to_norm_c(self):
        rng = np.random.default_rng(0)
        grads = rng.standard_normal((20, 4)) * 10 + 5
        clipped, count = clip_gradients(grads, 0.01)
        assert count == 20
        assert np.allclose(np.linalg.norm(clipped, axis=1), 0.01, rtol=1e-12)

    def test_noise_needs_clip(self):
        problem = linreg(2)
        config = SgdConfig(T=1, batch_size=4, learning_rate=0.1, theta0=np.zeros(2), noise_multiplier=1.0)
        with pytest.raises(ValueError):
            run_dpsgd(problem, config, no_insert(problem), RngStream(0))

    def test_noise_variance(self):
        sigma, C, n, eta = 1.5, 0.5, 16, 0.01
        problem = linreg(5)
        config = SgdConfig(T=10_000, batch_size=n, learning_rate=eta, theta0=problem.theta_star,
                           clip=C, noise_multiplier=sigma)
        trace = run_dpsgd(problem, config, no_insert(problem), RngStream(9))
        residual = -(np.diff(trace.thetas, axis=0) / eta + trace.batch_grads)
        target = (sigma * C / n) ** 2
        samples = residual.ravel()
        assert abs(samples.var() / target - 1) < 3 * math.sqrt(2 / samples.size)
        assert np.allclose(residual, trace.noise, atol=1e-12)

    def test_noise_isolation_single_step(self):
        problem = linreg(4)
        base = SgdConfig(T=1, batch_size=8, learning_rate=0.2, theta0=np.zeros(4), clip=1.0)
        quiet = run_dpsgd(problem, base, no_insert(problem), RngStream(5))
        loud = run_dpsgd(problem, base.replace(noise_multiplier=2.0), no_insert(problem), RngStream(5))
        assert np.allclose(loud.thetas[1] - quiet.thetas[1], -0.2 * loud.noise[0], atol=1e-15)

    def test_noise_replay_every_step(self):
        problem = linreg(4)
        config = SgdConfig(T=8, batch_size=8, learning_rate=0.2, theta0=np.zeros(4), clip=1.0, noise_multiplier=2.0)
        stream = RngStream(6)
        trace = run_dpsgd(problem, config, no_insert(problem), stream)
        data = as_generator(stream, 0)
        theta = config.theta0.copy()
        for t in range(1, 9):
            batch = problem.sample(data, 8)
            g, _ = clip_gradients(problem.grads(theta, batch), 1.0)
            theta = theta - 0.2 * (g.mean(axis=0) + trace.noise[t - 1])
            assert np.array_equal(theta, trace.thetas[t])

    @given(hnp.arrays(np.float64, (6, 3), elements=st.floats(-1e3, 1e3)),
           st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
    def test_clip_monotone(self, grads, c1, c2):
        lo, hi = sorted((c1, c2))
        small = np.linalg.norm(clip_gradients(grads, lo)[0], axis=1)
        large = np.linalg.norm(clip_gradients(grads, hi)[0], axis=1)
        assert np.all(small <= large * (1 + 1e-12) + 1e-300)
        assert np.all(small <= lo * (1 + 1e-12))


class TestGradStats:
    def test_at_optimum(self):
        problem = LinRegProblem([1.0, 2.0], [[2.0, 0.3], [0.3, 1.0]], 0.5)
        gs = linreg_grad_stats(problem.theta_star, problem)
        assert np.array_equal(gs.mu_g, np.zeros(2))
        assert np.allclose(gs.sigma_g, 0.5 * problem.sigma_x)

    def test_unit_offset(self):
        problem = LinRegProblem(np.zeros(3), np.eye(3), 0.7)
        gs = linreg_grad_stats([1.0, 0.0, 0.0], problem)
        assert np.allclose(gs.mu_g, [1, 0, 0])
        expected = 1.7 * np.eye(3)
        expected[0, 0] += 1
        assert np.allclose(gs.sigma_g, expected, atol=1e-15)

    def test_monte_carlo(self):
        rng = np.random.default_rng(11)
        problem = LinRegProblem([1.0, -1.0, 0.5], [[1.0, 0.2, 0.0], [0.2, 2.0, 0.1], [0.0, 0.1, 0.5]], 0.8)
        theta = problem.theta_star + rng.standard_normal(3)
        g = problem.grads(theta, problem.sample(rng, 10**6))
        gs = linreg_grad_stats(theta, problem)
        assert np.linalg.norm(g.mean(axis=0) - gs.mu_g) / np.linalg.norm(gs.mu_g) < 0.01
        assert np.linalg.norm(np.cov(g, rowvar=False) - gs.sigma_g) / np.linalg.norm(gs.sigma_g) < 0.01

    def test_identical_points(self):
        problem = linreg(3)
        pts = np.tile([1.0, 2.0, 3.0, 0.0], (10, 1))
        gs = estimate_grad_stats(problem.theta_star, pts, problem, ridge=0.25)
        assert np.allclose(gs.sigma_g, 0.25 * np.eye(3))
        assert gs.provenance == "estimated" and gs.ridge == 0.25
        with pytest.raises(CovarianceError, match="larger ridge"):
            estimate_grad_stats(problem.theta_star, pts, problem, ridge=0.0)

    def test_needs_two(self):
        problem = linreg(3)
        with pytest.raises(ValueError):
            estimate_grad_stats(problem.theta_star, np.zeros((1, 4)), problem)

    def test_rank_deficient(self):
        problem = linreg(4)
        pts = problem.sample(np.random.default_rng(0), 4)
        gs = estimate_grad_stats(problem.theta_star, pts, problem, ridge=1e-6)
        assert np.all(np.linalg.eigvalsh(gs.sigma_g) > 0)

    def test_default_ridge(self):
        problem = linreg(3)
        pts = problem.sample(np.random.default_rng(1), 50)
        gs = estimate_grad_stats(problem.theta_star, pts, problem)
        raw = np.cov(problem.grads(problem.theta_star, pts), rowvar=False)
        assert gs.ridge == pytest.approx(1e-6 * np.trace(raw) / 3)

    def test_converges_to_exact(self):
        problem = linreg(5)
        rng = np.random.default_rng(2)
        theta = problem.theta_star + 0.5 * rng.standard_normal(5)
        m = 10**5
        grads = problem.grads(theta, problem.sample(rng, m))
        est = estimate_grad_stats(theta, problem.sample(np.random.default_rng(3), m), problem)
        exact = linreg_grad_stats(theta, problem)
        centred = grads - exact.mu_g
        products = np.einsum("ki,kj->kij", centred, centred)
        se_cov = products.std(axis=0) / math.sqrt(m)
        se_mu = grads.std(axis=0) / math.sqrt(m)
        assert np.all(np.abs(est.sigma_g - exact.sigma_g) <= 4 * se_cov)
        assert np.all(np.abs(est.mu_g - exact.mu_g) <= 4 * se_mu)

    def test_estimated_statistic_converges(self):
        problem = linreg(5)
        rng = np.random.default_rng(3)
        theta = problem.theta_star + rng.standard_normal(5) / math.sqrt(5)
        n, eta = 50, 0.05
        target = np.concatenate([2 * np.eye(5)[0], [2 * 1.0 + 3.0]])
        g_star = target_gradient(theta, problem, target)
        config = SgdConfig(T=1, batch_size=n, learning_rate=eta, theta0=theta)
        nexts = [run_sgd(problem, config, InsertionSpec(r % 2, 1, target, J=1), RngStream(3, r)).thetas[1]
                 for r in range(400)]
        exact_gs = linreg_grad_stats(theta, problem)
        exact = np.array([semi_sgd(theta, t, eta, n, exact_gs, g_star) for t in nexts])

        def rel_error(m):
            errs = []
            for s in range(3):
                gs = estimate_grad_stats(theta, problem.sample(np.random.default_rng(50 + s), m), problem)
                est = np.array([semi_sgd(theta, t, eta, n, gs, g_star) for t in nexts])
                errs.append(np.linalg.norm(est - exact) / np.linalg.norm(exact))
            return float(np.mean(errs))

        errors = [rel_error(m) for m in (10**3, 10**4, 10**5)]
        assert errors[0] > errors[1] > errors[2]
        assert errors[2] < 0.05


class TestMeanEquivalence:
    def test_pipelines_agree(self):
        mu, var, n, T, z = -0.3, 1.5, 10, 5, 2.5
        problem = QuadraticMeanProblem([mu], [[var]])
        config = SgdConfig(T=T, batch_size=n, learning_rate="inverse_time", theta0=[0.0])
        rng = np.random.default_rng(0)
        for r in range(1000):
            B, tau = int(rng.integers(2)), int(rng.integers(1, T + 1))
            trace = run_sgd(problem, config, InsertionSpec(B, tau, [z], J=1), RngStream(12, r))
            prev, nxt = trace.thetas[tau - 1], trace.thetas[tau]
            sgd_val = semi_sgd(prev, nxt, 1.0 / tau, n, problem.exact_grad_stats(prev),
                               problem.grads(prev, [[z]])[0])
            xbar = recover_batch_mean(MeanTrace(trace.thetas[1:], n), tau)[0]
            assert abs(sgd_val - semi_star_uni(xbar, mu, var, n, z)) <= 1e-10


class TestDetectability:
    def test_zero_residual(self):
        problem = linreg(3)
        x = np.array([1.0, 2.0, 3.0])
        assert detectability_at_optimum(problem, np.append(x, problem.theta_star @ x)) == 0.0

    def test_factorisation(self):
        problem = linreg(4, eps2=0.64)
        x = 3.0 * np.eye(4)[0]
        target = np.append(x, problem.theta_star @ x + 0.8)
        assert detectability(problem.theta_star, problem, target) == pytest.approx(9.0, abs=1e-12)

    def test_closed_form_equals_mahalanobis(self):
        problem = LinRegProblem([1.0, -1.0], [[2.0, 0.4], [0.4, 1.0]], 0.3)
        target = np.array([0.5, 1.5, 2.0])
        general = mahalanobis_sq(target_gradient(problem.theta_star, problem, target),
                                 linreg_grad_stats(problem.theta_star, problem).sigma_g)
        assert detectability_at_optimum(problem, target) == pytest.approx(general, rel=1e-12)

    def test_general_theta(self):
        problem = linreg(3)
        theta = np.array([0.5, 1.2, 0.9])
        target = np.array([1.0, -1.0, 2.0, 4.0])
        gs = linreg_grad_stats(theta, problem)
        expected = mahalanobis_sq(problem.grads(theta, target[None, :])[0] - gs.mu_g, gs.sigma_g)
        assert detectability(theta, problem, target) == pytest.approx(expected, rel=1e-12)


class TestSelectTarget:
    def test_single(self):
        problem = linreg(2)
        gs = linreg_grad_stats(problem.theta_star, problem)
        assert select_target([[1.0, 0.0, 5.0]], problem.theta_star, gs, problem)[0] == 0

    def test_outlier_residual(self):
        problem = linreg(3)
        gs = linreg_grad_stats(problem.theta_star, problem)
        xs = np.eye(3)[[0, 1, 2, 0, 1]]
        residuals = np.array([0.5, 0.5, 5.0, 0.5, 0.5])
        pool = np.column_stack([xs, xs @ problem.theta_star + residuals])
        idx, m = select_target(pool, problem.theta_star, gs, problem)
        assert idx == 2
        assert m == pytest.approx(detectability_at_optimum(problem, pool[2]))

    def test_ties_lowest_index(self):
        problem = linreg(2)
        gs = linreg_grad_stats(problem.theta_star, problem)
        pool = np.array([[1.0, 0.0, 3.0], [1.0, 0.0, 3.0]])
        assert select_target(pool, problem.theta_star, gs, problem)[0] == 0

    def test_empty(self):
        problem = linreg(2)
        gs = linreg_grad_stats(problem.theta_star, problem)
        with pytest.raises(ValueError):
            select_target(np.zeros((0, 3)), problem.theta_star, gs, problem)

    @given(st.integers(0, 10**6), st.permutations(range(6)))
    @settings(max_examples=30)
    def test_permutation_equivariance(self, seed, perm):
        problem = linreg(3)
        pool = np.random.default_rng(seed).standard_normal((6, 4)) * 3
        gs = linreg_grad_stats(problem.theta_star + 0.1, problem)
        idx, m = select_target(pool, problem.theta_star + 0.1, gs, problem)
        perm = list(perm)
        idx2, m2 = select_target(pool[perm], problem.theta_star + 0.1, gs, problem)
        assert perm[idx2] == idx
        assert m2 == m


class TestLogReg:
    def test_gradient_matches_finite_difference(self):
        problem = LogRegProblem([1.0, -1.0], np.eye(2))
        pt = np.array([0.3, -0.7, 1.0])
        theta = np.array([0.2, 0.5])
        h = 1e-6
        fd = [(problem.losses(theta + h * e, pt[None])[0] - problem.losses(theta - h * e, pt[None])[0]) / (2 * h)
              for e in np.eye(2)]
        assert np.allclose(problem.grads(theta, pt[None])[0], fd, atol=1e-8)
        assert problem.path_losses(np.array([theta]), pt)[0] == pytest.approx(problem.losses(theta, pt[None])[0])

    def test_labels_binary(self):
        problem = LogRegProblem([1.0, -1.0], np.eye(2))
        assert set(np.unique(problem.sample(np.random.default_rng(0), 500)[:, -1])) <= {0.0, 1.0}


def test_param_trace_csv(tmp_path):
    problem = linreg(2)
    config = SgdConfig(T=3, batch_size=4, learning_rate=0.1, theta0=np.zeros(2))
    trace = run_sgd(problem, config, no_insert(problem), RngStream(0))
    path = tmp_path / "trace.csv"
    write_param_trace_csv(trace, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,theta_0,theta_1"
    assert len(lines) == 5
    assert [float(v) for v in lines[-1].split(",")[1:]] == list(trace.thetas[-1])

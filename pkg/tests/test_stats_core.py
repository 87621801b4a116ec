import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from seqmi.errors import CovarianceError
from seqmi.stats_core import (
    GaussianParams,
    RngStream,
    log_sum_exp,
    mahalanobis_sq,
    noncentral_chi2_cdf,
    sample_gaussian,
    std_normal_cdf,
    std_normal_sf,
)

finite = st.floats(min_value=-30, max_value=30, allow_nan=False)


def taylor_phi(x: float, terms: int = 80) -> float:
    """Phi from the Maclaurin series of the error function (oracle for |x| <= 3)."""
    total, term = 0.0, x
    for k in range(terms):
        total += term / (2 * k + 1)
        term *= -x * x / (2 * (k + 1))
    return 0.5 + total / math.sqrt(2 * math.pi)


class TestRngStream:
    def test_same_key_same_draws(self):
        a = RngStream(11, 3).generator(1).standard_normal(50)
        b = RngStream(11, 3).generator(1).standard_normal(50)
        assert np.array_equal(a, b)

    def test_distinct_ids_and_substreams_differ(self):
        base = RngStream(11, 3).generator(0).standard_normal(20)
        assert not np.array_equal(base, RngStream(11, 4).generator(0).standard_normal(20))
        assert not np.array_equal(base, RngStream(11, 3).generator(1).standard_normal(20))
        assert not np.array_equal(base, RngStream(12, 3).generator(0).standard_normal(20))

    def test_streams_uncorrelated(self):
        x = np.array([RngStream(5, k).generator().standard_normal() for k in range(4000)])
        y = np.array([RngStream(5, k + 4000).generator().standard_normal() for k in range(4000)])
        assert abs(np.corrcoef(x, y)[0, 1]) < 4 / math.sqrt(4000)

    @pytest.mark.parametrize("seed,sid", [(-1, 0), (2**64, 0), (0, 2**64)])
    def test_rejects_out_of_range(self, seed, sid):
        with pytest.raises(ValueError):
            RngStream(seed, sid)

    def test_max_u64_accepted(self):
        RngStream(2**64 - 1, 2**64 - 1).generator().random()


class TestNormalCdf:
    def test_zero(self):
        assert std_normal_cdf(0.0) == 0.5

    @pytest.mark.parametrize("x", [1.0, -0.5, 2.3, 0.01])
    def test_matches_series(self, x):
        assert abs(std_normal_cdf(x) - taylor_phi(x)) < 1e-12

    @given(finite)
    def test_symmetry(self, x):
        assert abs(std_normal_cdf(x) + std_normal_cdf(-x) - 1.0) < 1e-15

    @given(finite, finite)
    def test_monotone(self, x, y):
        lo, hi = sorted((x, y))
        assert std_normal_cdf(lo) <= std_normal_cdf(hi)

    def test_sf_tail_precision(self):
        assert std_normal_sf(10.0) == pytest.approx(7.619853024160527e-24, rel=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            std_normal_cdf(math.nan)


class TestLogSumExp:
    def test_single(self):
        assert log_sum_exp([2.5]) == 2.5

    def test_copies(self):
        assert log_sum_exp([1.7] * 6) == pytest.approx(1.7 + math.log(6), abs=1e-14)

    def test_direct(self):
        assert log_sum_exp([0.0, math.log(3)]) == pytest.approx(math.log(4), abs=1e-15)

    def test_extremes(self):
        assert log_sum_exp([1e6, 1e6]) == pytest.approx(1e6 + math.log(2))
        assert log_sum_exp([-1e6, -1e6 - 1]) == pytest.approx(-1e6 + math.log1p(math.exp(-1)))

    def test_empty(self):
        with pytest.raises(ValueError, match="empty statistic list"):
            log_sum_exp([])

    @given(st.lists(st.floats(min_value=-1e6, max_value=1e6), min_size=1, max_size=30))
    def test_bounds(self, values):
        gap = log_sum_exp(values) - max(values)
        assert -1e-9 <= gap <= math.log(len(values)) + 1e-9


class TestNoncentralChi2:
    def test_central_case(self):
        xs = np.linspace(0.1, 20, 15)
        for d in (1, 3, 10):
            assert np.allclose(noncentral_chi2_cdf(xs, d, 0.0), scipy.stats.chi2.cdf(xs, d), atol=1e-14)

    def test_zero_argument(self):
        assert noncentral_chi2_cdf(0.0, 4, 7.5) == 0.0
        assert noncentral_chi2_cdf(-3.0, 4, 7.5) == 0.0

    def test_one_dof(self):
        assert noncentral_chi2_cdf(1.0, 1, 0.0) == pytest.approx(2 * std_normal_cdf(1.0) - 1, abs=1e-14)

    @pytest.mark.parametrize("d,lam", [(1, 0.5), (2, 90.0), (5, 9.0), (50, 90.0), (10, 900.0), (3, 1e-8)])
    def test_against_scipy(self, d, lam):
        xs = np.linspace(0.0, d + lam + 8 * math.sqrt(2 * d + 4 * lam), 25)[1:]
        assert np.allclose(noncentral_chi2_cdf(xs, d, lam), scipy.stats.ncx2.cdf(xs, d, lam), atol=1e-10)

    def test_negative_noncentrality(self):
        with pytest.raises(ValueError):
            noncentral_chi2_cdf(1.0, 2, -1.0)

    def test_against_simulation(self):
        rng = RngStream(3, 0).generator()
        d, lam, size = 3, 4.0, 10**6
        z = rng.standard_normal((size, d))
        z[:, 0] += math.sqrt(lam)
        draws = np.sort(np.einsum("ij,ij->i", z, z))
        grid = np.quantile(draws, np.linspace(0.05, 0.95, 10))
        emp = np.searchsorted(draws, grid, side="right") / size
        p = noncentral_chi2_cdf(grid, d, lam)
        assert np.all(np.abs(emp - p) <= 3 * np.sqrt(p * (1 - p) / size) + 1e-6)

    @given(st.floats(0, 200), st.floats(0, 200), st.integers(1, 30), st.floats(0, 100))
    @settings(max_examples=60)
    def test_monotone_in_x(self, x, y, d, lam):
        lo, hi = sorted((x, y))
        assert noncentral_chi2_cdf(lo, d, lam) <= noncentral_chi2_cdf(hi, d, lam) + 1e-15


class TestMahalanobis:
    def test_zero(self):
        assert mahalanobis_sq(np.zeros(3), np.eye(3)) == 0.0

    def test_identity(self):
        v = np.array([1.0, -2.0, 0.5])
        assert mahalanobis_sq(v, np.eye(3)) == pytest.approx(v @ v)

    def test_hand_inverse(self):
        assert mahalanobis_sq([2.0, 1.0], [[2.0, 0.0], [0.0, 1.0]]) == pytest.approx(3.0)

    def test_not_spd(self):
        with pytest.raises(CovarianceError, match="covariance not positive definite"):
            mahalanobis_sq([1.0, 1.0], [[1.0, 2.0], [2.0, 1.0]])

    @given(st.integers(1, 6), st.integers(0, 10**6))
    @settings(max_examples=30)
    def test_matches_solve(self, d, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((d, d))
        sigma = a @ a.T + d * np.eye(d)
        v = rng.standard_normal(d)
        assert mahalanobis_sq(v, sigma) == pytest.approx(v @ np.linalg.solve(sigma, v), rel=1e-9)


class TestGaussian:
    def test_degenerate_samples_equal_mean(self):
        params = GaussianParams([1.5, -2.0], np.zeros((2, 2)))
        assert np.array_equal(sample_gaussian(RngStream(0), params, 5), np.tile([1.5, -2.0], (5, 1)))

    def test_deterministic(self):
        params = GaussianParams([0.0, 1.0], [[2.0, 0.3], [0.3, 1.0]])
        a = sample_gaussian(RngStream(9, 2), params, 100)
        b = sample_gaussian(RngStream(9, 2), params, 100)
        assert np.array_equal(a, b)

    def test_moments(self):
        x = sample_gaussian(RngStream(1), GaussianParams(0.0, 1.0), 10**6)[:, 0]
        assert abs(x.mean()) < 4 / 1000
        assert 0.99 <= x.var() <= 1.01

    def test_covariance_shapes(self):
        assert np.array_equal(GaussianParams([0, 0], [1.0, 4.0]).cov, np.diag([1.0, 4.0]))
        assert GaussianParams(0.0, 2.0).cov.shape == (1, 1)

    def test_asymmetric_rejected(self):
        with pytest.raises(CovarianceError):
            GaussianParams([0, 0], [[1.0, 0.1], [0.2, 1.0]])

    def test_indefinite_rejected(self):
        with pytest.raises(CovarianceError):
            GaussianParams([0, 0], [[1.0, 2.0], [2.0, 1.0]])

"""Closed-form Type I/II errors of the Gaussian-mean membership tests.

Notation: ``m_star`` is the squared Mahalanobis distance of the target from the
population mean and ``n`` the batch size the statistic is computed on. A test
rejects (declares IN) when its log-LR is at least ``gamma``.
"""
from __future__ import annotations

import csv
import dataclasses
import math
from pathlib import Path

import numpy as np

from seqmi.stats_core import noncentral_chi2_cdf, std_normal_cdf, std_normal_sf

_GAMMA_FLOOR = -50.0


def _check(n: int, m_star: float) -> None:
    if n < 2:
        raise ValueError("batch size must be ≥ 2")
    if m_star < 0:
        raise ValueError("m_star must be non-negative")


def gamma_max(n: int, m_star: float) -> float:
    """Largest attainable log-LR; above it the test never rejects."""
    return 0.5 * (m_star - math.log((n - 1) / n))


def _a_b(gamma: float, n: int, m_star: float) -> tuple[float, float]:
    a = math.sqrt(m_star * n)
    inner = m_star - math.log1p(-1.0 / n) - 2.0 * gamma
    return a, math.sqrt((n - 1) * max(inner, 0.0))


def _interval_mass(lo: float, hi: float) -> float:
    """``Phi(hi) - Phi(lo)`` using whichever tail keeps precision."""
    if lo > 0:
        return std_normal_sf(lo) - std_normal_sf(hi)
    return std_normal_cdf(hi) - std_normal_cdf(lo)


def alpha_semi_star(gamma: float, n: int, m_star: float) -> float:
    """Type I error of the known-tau test on a batch of size n."""
    _check(n, m_star)
    if gamma > gamma_max(n, m_star):
        return 0.0
    a, b = _a_b(gamma, n, m_star)
    return _interval_mass(a - b, a + b)


def beta_semi_star(gamma: float, n: int, m_star: float) -> float:
    """Type II error of the known-tau test; 1 when gamma exceeds gamma_max."""
    _check(n, m_star)
    if gamma > gamma_max(n, m_star):
        return 1.0
    a, b = _a_b(gamma, n, m_star)
    shift = a * math.sqrt((n - 1) / n)
    spread = b * math.sqrt(n / (n - 1))
    return std_normal_cdf(shift - spread) + std_normal_cdf(-shift - spread)


def _check_fo(n: int, T: int) -> int:
    if T < 1 or n * T < 2:
        raise ValueError("n*T must be ≥ 2")
    return n * T


def gamma_max_fo(n: int, T: int, m_star: float) -> float:
    return gamma_max(_check_fo(n, T), m_star)


def alpha_fo(gamma: float, n: int, T: int, m_star: float) -> float:
    """Type I error of the final-observation test (batch size n*T)."""
    return alpha_semi_star(gamma, _check_fo(n, T), m_star)


def beta_fo(gamma: float, n: int, T: int, m_star: float) -> float:
    """Type II error of the final-observation test (batch size n*T)."""
    return beta_semi_star(gamma, _check_fo(n, T), m_star)


def alpha_glr(gamma: float, n: int, m_star: float, T: int) -> float:
    """Type I error of the max-over-tau test: T independent chances to fire."""
    a0 = alpha_semi_star(gamma, n, m_star)
    if a0 >= 1.0:
        return 1.0
    return -math.expm1(T * math.log1p(-a0))


def beta_glr(gamma: float, n: int, m_star: float, T: int) -> float:
    """Type II error of the max-over-tau test; independent of the true tau."""
    a0 = alpha_semi_star(gamma, n, m_star)
    b0 = beta_semi_star(gamma, n, m_star)
    if T == 1:
        return b0
    return b0 * (1.0 - a0) ** (T - 1)


def _bisect_alpha(alpha_fn, target: float, hi: float) -> float:
    lo = _GAMMA_FLOOR
    if alpha_fn(lo) < target:
        raise ValueError(f"type I error {target} unattainable above gamma={lo}")
    # alpha_fn is nonincreasing on [lo, hi] and alpha_fn(hi) == 0.
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if alpha_fn(mid) >= target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15 * max(1.0, abs(lo)):
            break
    if abs(alpha_fn(lo) - target) > 1e-10:
        raise ArithmeticError("threshold bisection did not converge")
    return lo


def glr_threshold_for_alpha(alpha_target: float, n: int, m_star: float, T: int) -> float:
    """Threshold giving the max-over-tau test overall Type I error ``alpha_target``.

    Solves ``alpha_0(gamma) = 1 - (1 - alpha)^(1/T)`` by bisection on
    ``[-50, gamma_max]``.
    """
    if not 0 < alpha_target < 1:
        raise ValueError("alpha_target must lie in (0, 1)")
    _check(n, m_star)
    per_batch = -math.expm1(math.log1p(-alpha_target) / T)
    return _bisect_alpha(lambda g: alpha_semi_star(g, n, m_star), per_batch, gamma_max(n, m_star))


def threshold_for_alpha(alpha_target: float, n: int, m_star: float) -> float:
    """Known-tau threshold at Type I error ``alpha_target``."""
    return glr_threshold_for_alpha(alpha_target, n, m_star, 1)


def power_semi_star(alpha_target: float, n: int, m_star: float) -> float:
    return 1.0 - beta_semi_star(threshold_for_alpha(alpha_target, n, m_star), n, m_star)


def power_fo(alpha_target: float, n: int, T: int, m_star: float) -> float:
    nt = _check_fo(n, T)
    return 1.0 - beta_semi_star(threshold_for_alpha(alpha_target, nt, m_star), nt, m_star)


def power_glr(alpha_target: float, n: int, m_star: float, T: int) -> float:
    gamma = glr_threshold_for_alpha(alpha_target, n, m_star, T)
    return 1.0 - beta_glr(gamma, n, m_star, T)


def gamma_max_mv(n: int, d: int, m_star: float) -> float:
    return 0.5 * (m_star - d * math.log((n - 1) / n))


def _radius_sq_mv(gamma: float, n: int, d: int, m_star: float) -> float:
    return 2.0 * (n - 1) / n * (0.5 * m_star - gamma - 0.5 * d * math.log((n - 1) / n))


def alpha_semi_star_mv(gamma: float, n: int, d: int, m_star: float) -> float:
    """Type I error of the d-dimensional known-tau test.

    Under H0 the whitened, target-centred batch mean lies inside a ball of
    squared radius ``R^2(gamma)`` exactly when the test fires, so the error is a
    non-central chi-squared CDF with d degrees of freedom and non-centrality
    ``n * m_star`` evaluated at ``n * R^2(gamma)``, where
    ``R^2(gamma) = 2(n-1)/n * (m_star/2 - gamma - d/2 * log((n-1)/n))``.
    """
    _check(n, m_star)
    if d < 1:
        raise ValueError("dimension must be >= 1")
    if gamma >= gamma_max_mv(n, d, m_star):
        return 0.0
    return noncentral_chi2_cdf(n * _radius_sq_mv(gamma, n, d, m_star), d, n * m_star)


def threshold_for_alpha_mv(alpha_target: float, n: int, d: int, m_star: float) -> float:
    if not 0 < alpha_target < 1:
        raise ValueError("alpha_target must lie in (0, 1)")
    _check(n, m_star)
    return _bisect_alpha(lambda g: alpha_semi_star_mv(g, n, d, m_star), alpha_target,
                         gamma_max_mv(n, d, m_star))


@dataclasses.dataclass(frozen=True, eq=False)
class ErrorCurve:
    """Closed-form alpha/beta along a sorted threshold grid."""

    gammas: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    kind: str
    meta: dict

    @property
    def power(self) -> np.ndarray:
        return 1.0 - self.beta

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["gamma", "alpha", "beta", "power"])
            for row in zip(self.gammas, self.alpha, self.beta, self.power):
                writer.writerow([repr(float(v)) for v in row])


def error_curve(kind: str, gammas, n: int, m_star: float, T: int = 1) -> ErrorCurve:
    """Tabulates alpha and beta for ``semi_star``, ``final_observation`` or ``semi_max``."""
    grid = np.sort(np.asarray(gammas, dtype=float))
    if kind == "semi_star":
        fa = lambda g: alpha_semi_star(g, n, m_star)
        fb = lambda g: beta_semi_star(g, n, m_star)
    elif kind == "final_observation":
        fa = lambda g: alpha_fo(g, n, T, m_star)
        fb = lambda g: beta_fo(g, n, T, m_star)
    elif kind == "semi_max":
        fa = lambda g: alpha_glr(g, n, m_star, T)
        fb = lambda g: beta_glr(g, n, m_star, T)
    else:
        raise ValueError(f"no closed form for {kind!r}")
    alpha = np.array([fa(g) for g in grid])
    beta = np.array([fb(g) for g in grid])
    meta = {"n": n, "T": T, "m_star": m_star, "d": 1}
    return ErrorCurve(grid, alpha, beta, kind, meta)

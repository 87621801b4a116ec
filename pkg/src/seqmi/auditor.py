"""High-probability epsilon lower bounds from game records, and the testbed's true epsilon.

The audit inflates empirical Type I/II errors by a DKW band that holds
uniformly over thresholds, so sweeping every observed statistic costs no union
bound. The ground truth treats T full-batch DP-SGD steps as one Gaussian
mechanism (no subsampling), for which the analytic privacy curve is exact.
"""
from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path

import numpy as np
import scipy.optimize
from scipy.special import log_ndtr, ndtr, ndtri

from seqmi.game import GameRecords, default_gamma_grid, estimate_errors
from seqmi.sgd_mechanism import SgdConfig

ALPHA_SIDE = "alpha"
BETA_SIDE = "beta"


@dataclasses.dataclass(frozen=True)
class AuditConfig:
    delta: float = 1e-4
    xi: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.delta < 1.0:
            raise ValueError("delta must lie in [0, 1)")
        if not 0.0 < self.xi < 1.0:
            raise ValueError("xi must lie in (0, 1)")


@dataclasses.dataclass(frozen=True)
class AuditOutcome:
    epsilon_lb: float
    gamma: float
    side: str
    alpha_ucb: float
    beta_ucb: float
    n0: int
    n1: int
    xi: float
    delta: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, path: str | Path) -> None:
        payload = {k: (v if not isinstance(v, float) or math.isfinite(v) else repr(v))
                   for k, v in self.to_dict().items()}
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def dkw_half_width(count: int, xi: float) -> float:
    """Two-sided DKW radius at confidence 1 - xi/2 for ``count`` samples."""
    if count < 1:
        raise ValueError("need both member and non-member rounds")
    if not 0.0 < xi < 1.0:
        raise ValueError("xi must lie in (0, 1)")
    return math.sqrt(math.log(4.0 / xi) / (2.0 * count))


def ucb_errors(records: GameRecords, gamma_grid, xi: float, adversary: str):
    """Upper confidence bounds (alpha_bar, beta_bar) on the grid, clipped to [0, 1]."""
    est = estimate_errors(records, gamma_grid, adversary)
    alpha = np.minimum(est.alpha + dkw_half_width(est.n0, xi), 1.0)
    beta = np.minimum(est.beta + dkw_half_width(est.n1, xi), 1.0)
    return alpha, beta


def epsilon_from_errors(alpha, beta, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Both (epsilon, delta)-DP bounds implied by a test with errors (alpha, beta).

    Returns the two log-ratios elementwise; -inf where a numerator is not
    positive, +inf where a denominator is zero.
    """
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)

    def log_ratio(num, den):
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(num > 0, np.log(np.where(num > 0, num, 1.0)) - np.log(den), -np.inf)
        return out

    return log_ratio(1.0 - delta - alpha, beta), log_ratio(1.0 - delta - beta, alpha)


def epsilon_lower_bound(records: GameRecords, adversary: str, delta: float = 1e-4,
                        xi: float = 0.05) -> AuditOutcome:
    """Largest epsilon the records certify with probability at least 1 - xi.

    Sweeps gamma over the observed statistics plus +-inf and both error
    trade-off branches; a negative best value is clamped to 0.
    """
    AuditConfig(delta, xi)
    grid = default_gamma_grid(records, adversary)
    alpha, beta = ucb_errors(records, grid, xi, adversary)
    eps_a, eps_b = epsilon_from_errors(alpha, beta, delta)
    i_a, i_b = int(np.argmax(eps_a)), int(np.argmax(eps_b))
    if eps_a[i_a] >= eps_b[i_b]:
        best, side, i = eps_a[i_a], ALPHA_SIDE, i_a
    else:
        best, side, i = eps_b[i_b], BETA_SIDE, i_b
    return AuditOutcome(
        epsilon_lb=max(0.0, float(best)),
        gamma=float(grid[i]),
        side=side,
        alpha_ucb=float(alpha[i]),
        beta_ucb=float(beta[i]),
        n0=records.n0,
        n1=records.n1,
        xi=xi,
        delta=delta,
    )


# --------------------------------------------------------------------------
# Ground truth


def gaussian_delta(epsilon: float, mu: float) -> float:
    """delta(epsilon) of a Gaussian mechanism with sensitivity-to-noise ratio mu."""
    if mu <= 0:
        return 0.0
    return float(ndtr(-epsilon / mu + mu / 2) - math.exp(epsilon + log_ndtr(-epsilon / mu - mu / 2)))


def gaussian_epsilon(mu: float, delta: float) -> float:
    """Smallest epsilon with ``gaussian_delta(epsilon, mu) <= delta``."""
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if math.isinf(mu):
        return math.inf
    if gaussian_delta(0.0, mu) <= delta:
        return 0.0
    hi = 1.0
    while gaussian_delta(hi, mu) > delta:
        hi *= 2.0
    return float(scipy.optimize.brentq(lambda e: gaussian_delta(e, mu) - delta, 0.0, hi, xtol=1e-13, rtol=1e-13))


def gaussian_epsilon_tradeoff(mu: float, delta: float) -> float:
    """Same quantity from the trade-off curve ``f(a) = Phi(Phi^-1(1 - a) - mu)``.

    epsilon = sup_a log((1 - delta - f(a)) / a), maximised numerically over
    ``log a``. Used as an independent check of :func:`gaussian_epsilon`.
    """

    def neg(log_a):
        # 1 - f(a) written as an upper tail so tiny a keeps full precision.
        num = ndtr(ndtri(math.exp(log_a)) + mu) - delta
        return math.inf if num <= 0 else -(math.log(num) - log_a)

    grid = np.linspace(-700.0, 0.0, 14001)[:-1]
    values = np.array([neg(g) for g in grid])
    k = int(np.argmin(values))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
    res = scipy.optimize.minimize_scalar(neg, bounds=(lo, hi), method="bounded",
                                         options={"xatol": 1e-12})
    return max(0.0, -min(res.fun, values[k]))


def composed_mu(noise_multiplier: float, T: int) -> float:
    """mu of T full-batch DP-SGD steps: sensitivity C/n against noise sigma C/n each."""
    if noise_multiplier < 0 or T < 1:
        raise ValueError("need noise_multiplier >= 0 and T >= 1")
    if noise_multiplier == 0:
        return math.inf
    return math.sqrt(T) / noise_multiplier


def composed_epsilon(noise_multiplier: float, T: int, delta: float) -> float:
    return gaussian_epsilon(composed_mu(noise_multiplier, T), delta)


def ground_truth_epsilon(config: SgdConfig, delta: float) -> float:
    """Exact epsilon of a full-batch DP-SGD run; ``inf`` without noise."""
    return composed_epsilon(config.noise_multiplier, config.T, delta)


def noise_multiplier_for_epsilon(epsilon: float, T: int, delta: float) -> float:
    """Noise multiplier whose T-step run has exactly ``epsilon``."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    lo, hi = 0.5, 1.0
    while composed_epsilon(hi, T, delta) > epsilon:
        hi *= 2.0
    while composed_epsilon(lo, T, delta) < epsilon:
        lo /= 2.0
    return float(scipy.optimize.brentq(lambda s: composed_epsilon(s, T, delta) - epsilon, lo, hi,
                                       xtol=1e-13, rtol=1e-13))

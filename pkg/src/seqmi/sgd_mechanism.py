"""SGD and DP-SGD trainers on synthetic problems, plus gradient statistics.

Data points are flat float vectors. For the regression problems a point is
``[x_1, ..., x_d, y]``; for :class:`QuadraticMeanProblem` it is just ``x``.
"""
from __future__ import annotations

import csv
import dataclasses
import math
from collections.abc import Sequence
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.special

from seqmi.errors import CovarianceError
from seqmi.mean_mechanism import InsertionSpec
from seqmi.mi_tests import GradientStats
from seqmi.stats_core import (
    GaussianParams,
    RandomSource,
    as_generator,
    cholesky,
    mahalanobis_sq,
    sample_gaussian,
)

# Substreams of a round's RngStream.
DATA_SUBSTREAM = 0
NOISE_SUBSTREAM = 1


class QuadraticMeanProblem:
    """Loss ``0.5 * ||theta - x||^2`` on ``x ~ N(mu, sigma)``.

    With learning rate 1/t and theta_0 = 0, SGD reproduces the running mean.
    """

    def __init__(self, mu, sigma):
        self.data = GaussianParams(mu, sigma)
        self.dim = self.data.dim
        self.point_dim = self.dim

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return sample_gaussian(rng, self.data, count)

    def grads(self, theta, points) -> np.ndarray:
        return np.asarray(theta)[None, :] - np.atleast_2d(points)

    def losses(self, theta, points) -> np.ndarray:
        diff = np.asarray(theta)[None, :] - np.atleast_2d(points)
        return 0.5 * np.einsum("ij,ij->i", diff, diff)

    def exact_grad_stats(self, theta) -> GradientStats:
        return GradientStats(np.asarray(theta, dtype=float) - self.data.mean, self.data.cov)

    def path_losses(self, thetas, point) -> np.ndarray:
        """Loss of one point under each row of ``thetas``."""
        diff = np.asarray(thetas) - np.asarray(point)[None, :]
        return 0.5 * np.einsum("ij,ij->i", diff, diff)


class LinRegProblem:
    """Gaussian-design linear regression with squared loss.

    ``x ~ N(0, sigma_x)``, ``y = theta_star . x + eps`` with
    ``eps ~ N(0, sigma_eps2)``, loss ``0.5 * (y - theta . x)^2``.
    """

    def __init__(self, theta_star, sigma_x, sigma_eps2: float):
        self.theta_star = np.atleast_1d(np.asarray(theta_star, dtype=float))
        self.dim = self.theta_star.shape[0]
        self.covariates = GaussianParams(np.zeros(self.dim), sigma_x)
        self.sigma_x = self.covariates.cov
        if not sigma_eps2 > 0:
            raise ValueError("sigma_eps2 must be positive")
        self.sigma_eps2 = float(sigma_eps2)
        self.point_dim = self.dim + 1

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        x = rng.standard_normal((count, self.dim)) @ self.covariates.chol.T
        y = x @ self.theta_star + math.sqrt(self.sigma_eps2) * rng.standard_normal(count)
        return np.column_stack([x, y])

    @staticmethod
    def split(points) -> tuple[np.ndarray, np.ndarray]:
        points = np.atleast_2d(points)
        return points[:, :-1], points[:, -1]

    def grads(self, theta, points) -> np.ndarray:
        x, y = self.split(points)
        return (x @ theta - y)[:, None] * x

    def losses(self, theta, points) -> np.ndarray:
        x, y = self.split(points)
        return 0.5 * (y - x @ theta) ** 2

    def exact_grad_stats(self, theta) -> GradientStats:
        return linreg_grad_stats(theta, self)

    def path_losses(self, thetas, point) -> np.ndarray:
        point = np.asarray(point, dtype=float)
        return 0.5 * (point[-1] - np.asarray(thetas) @ point[:-1]) ** 2


class LogRegProblem:
    """Well-specified logistic regression, labels in {0, 1}.

    Gradient statistics have no closed form here; attacks always estimate
    them from reference data.
    """

    def __init__(self, theta_star, sigma_x):
        self.theta_star = np.atleast_1d(np.asarray(theta_star, dtype=float))
        self.dim = self.theta_star.shape[0]
        self.covariates = GaussianParams(np.zeros(self.dim), sigma_x)
        self.sigma_x = self.covariates.cov
        self.point_dim = self.dim + 1

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        x = rng.standard_normal((count, self.dim)) @ self.covariates.chol.T
        p = scipy.special.expit(x @ self.theta_star)
        y = (rng.random(count) < p).astype(float)
        return np.column_stack([x, y])

    split = staticmethod(LinRegProblem.split)

    def grads(self, theta, points) -> np.ndarray:
        x, y = self.split(points)
        return (scipy.special.expit(x @ theta) - y)[:, None] * x

    def losses(self, theta, points) -> np.ndarray:
        x, y = self.split(points)
        z = x @ theta
        return np.logaddexp(0.0, z) - y * z

    def path_losses(self, thetas, point) -> np.ndarray:
        point = np.asarray(point, dtype=float)
        z = np.asarray(thetas) @ point[:-1]
        return np.logaddexp(0.0, z) - point[-1] * z


@dataclasses.dataclass(frozen=True, eq=False)
class SgdConfig:
    """Training schedule.

    ``learning_rate`` may be a constant, one value per step, or the string
    ``"inverse_time"`` for eta_t = 1/t. ``clip=None`` means no clipping.
    """

    T: int
    batch_size: int | Sequence[int]
    learning_rate: float | Sequence[float] | str
    theta0: np.ndarray
    clip: float | None = None
    noise_multiplier: float = 0.0

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        object.__setattr__(self, "theta0", np.atleast_1d(np.asarray(self.theta0, dtype=float)))
        sizes = [self.n(t) for t in range(1, self.T + 1)]
        if min(sizes) < 2:
            raise ValueError("batch size must be ≥ 2")
        rates = [self.eta(t) for t in range(1, self.T + 1)]
        if min(rates) <= 0:
            raise ValueError("learning rates must be positive")
        if self.clip is not None and not self.clip > 0:
            raise ValueError("clip threshold must be positive")
        if self.noise_multiplier < 0:
            raise ValueError("noise multiplier must be non-negative")

    def n(self, t: int) -> int:
        if isinstance(self.batch_size, (int, np.integer)):
            return int(self.batch_size)
        return int(self.batch_size[t - 1])

    def eta(self, t: int) -> float:
        if isinstance(self.learning_rate, str):
            if self.learning_rate != "inverse_time":
                raise ValueError(f"unknown learning-rate schedule {self.learning_rate!r}")
            return 1.0 / t
        if np.isscalar(self.learning_rate):
            return float(self.learning_rate)
        return float(self.learning_rate[t - 1])

    def replace(self, **changes) -> "SgdConfig":
        return dataclasses.replace(self, **changes)


@dataclasses.dataclass(frozen=True, eq=False)
class ParamTrace:
    """Parameters theta_0..theta_T plus per-step bookkeeping.

    Only ``thetas`` (and the public schedule) is meant for attacks; the
    gradient and noise arrays are kept for diagnostics.
    """

    thetas: np.ndarray
    learning_rates: tuple[float, ...]
    batch_sizes: tuple[int, ...]
    clip_counts: tuple[int, ...]
    batch_grads: np.ndarray
    noise: np.ndarray

    @property
    def T(self) -> int:
        return self.thetas.shape[0] - 1


def write_param_trace_csv(trace: ParamTrace, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"theta_{k}" for k in range(trace.thetas.shape[1])])
        for t, row in enumerate(trace.thetas):
            writer.writerow([t] + [repr(float(v)) for v in row])


def perturbed_start(theta_star, rng: np.random.Generator) -> np.ndarray:
    """theta_star plus a uniformly random unit vector."""
    direction = rng.standard_normal(np.shape(theta_star))
    return np.asarray(theta_star, dtype=float) + direction / np.linalg.norm(direction)


def clip_gradients(grads, clip: float | None) -> tuple[np.ndarray, int]:
    """Rescales rows with norm above ``clip`` onto the sphere of radius clip."""
    grads = np.atleast_2d(np.asarray(grads, dtype=float))
    if clip is None or math.isinf(clip):
        return grads, 0
    norms = np.sqrt(np.einsum("ij,ij->i", grads, grads))
    over = norms > clip
    if not over.any():
        return grads, 0
    scale = np.ones_like(norms)
    scale[over] = clip / norms[over]
    return grads * scale[:, None], int(np.count_nonzero(over))


def _train(problem, config: SgdConfig, insertion: InsertionSpec, stream: RandomSource,
           clip: float | None, noise_multiplier: float) -> ParamTrace:
    if insertion.B == 1:
        insertion.validate(config.T, config.n(insertion.tau), problem.point_dim)
    data_rng = as_generator(stream, DATA_SUBSTREAM)
    noise_rng = as_generator(stream, NOISE_SUBSTREAM) if noise_multiplier > 0 else None
    d = problem.dim
    thetas = np.empty((config.T + 1, d))
    thetas[0] = config.theta0
    grads_out = np.empty((config.T, d))
    noise_out = np.zeros((config.T, d))
    clip_counts = []
    for t in range(1, config.T + 1):
        n_t = config.n(t)
        batch = problem.sample(data_rng, n_t)
        if insertion.B == 1 and t == insertion.tau:
            batch[insertion.J - 1] = insertion.target
        per_sample, clipped = clip_gradients(problem.grads(thetas[t - 1], batch), clip)
        clip_counts.append(clipped)
        grads_out[t - 1] = per_sample.mean(axis=0)
        if noise_rng is not None:
            noise_out[t - 1] = noise_multiplier * clip / n_t * noise_rng.standard_normal(d)
        thetas[t] = thetas[t - 1] - config.eta(t) * (grads_out[t - 1] + noise_out[t - 1])
    return ParamTrace(
        thetas=thetas,
        learning_rates=tuple(config.eta(t) for t in range(1, config.T + 1)),
        batch_sizes=tuple(config.n(t) for t in range(1, config.T + 1)),
        clip_counts=tuple(clip_counts),
        batch_grads=grads_out,
        noise=noise_out,
    )


def run_sgd(problem, config: SgdConfig, insertion: InsertionSpec, stream: RandomSource) -> ParamTrace:
    """Plain mini-batch gradient descent; ignores ``config.clip`` and noise."""
    return _train(problem, config, insertion, stream, clip=None, noise_multiplier=0.0)


def run_dpsgd(problem, config: SgdConfig, insertion: InsertionSpec, stream: RandomSource) -> ParamTrace:
    """DP-SGD: per-sample clipping at C, then ``N(0, (sigma_DP * C / n_t)^2 I)`` noise.

    ``clip=None`` (or inf) with ``noise_multiplier=0`` reduces to :func:`run_sgd`
    on the same stream because noise comes from its own substream.
    """
    clip = config.clip
    if config.noise_multiplier > 0 and (clip is None or math.isinf(clip)):
        raise ValueError("DP noise needs a finite clip threshold")
    return _train(problem, config, insertion, stream, clip=clip, noise_multiplier=config.noise_multiplier)


def linreg_grad_stats(theta, problem: LinRegProblem) -> GradientStats:
    """Exact per-sample gradient mean and covariance for linear regression."""
    delta = np.asarray(theta, dtype=float) - problem.theta_star
    sx = problem.sigma_x
    mu_g = sx @ delta
    sigma_g = (problem.sigma_eps2 + delta @ sx @ delta) * sx + np.outer(mu_g, mu_g)
    return GradientStats(mu_g, sigma_g, provenance="exact")


def estimate_grad_stats(theta, reference_samples, problem, ridge: float | None = None,
                        clip: float | None = None) -> GradientStats:
    """Sample mean and unbiased covariance of reference per-sample gradients.

    Args:
      theta: Parameter point.
      reference_samples: ``(m, point_dim)`` points from the data distribution.
      problem: Supplies the per-sample gradient.
      ridge: Added to the covariance diagonal. ``None`` picks
        ``1e-6 * trace(cov) / d``.
      clip: Clip reference gradients first, as the audited DP-SGD run does.
    """
    reference = np.atleast_2d(np.asarray(reference_samples, dtype=float))
    if reference.shape[0] < 2:
        raise ValueError("need at least 2 reference samples")
    grads, _ = clip_gradients(problem.grads(np.asarray(theta, dtype=float), reference), clip)
    mu = grads.mean(axis=0)
    cov = np.atleast_2d(np.cov(grads, rowvar=False, ddof=1))
    d = cov.shape[0]
    if ridge is None:
        ridge = 1e-6 * float(np.trace(cov)) / d
    cov = cov + ridge * np.eye(d)
    try:
        cholesky(cov)
    except CovarianceError as exc:
        raise CovarianceError(f"estimated covariance not positive definite; use a larger ridge than {ridge}") from exc
    return GradientStats(mu, cov, provenance="estimated", ridge=float(ridge))


def target_gradient(theta, problem, target, clip: float | None = None) -> np.ndarray:
    grad, _ = clip_gradients(problem.grads(np.asarray(theta, dtype=float), np.atleast_2d(target)), clip)
    return grad[0]


def detectability_at_optimum(problem: LinRegProblem, target) -> float:
    """Label outlier score times feature leverage score."""
    target = np.asarray(target, dtype=float)
    x, y = target[:-1], target[-1]
    residual = y - problem.theta_star @ x
    return residual**2 / problem.sigma_eps2 * mahalanobis_sq(x, problem.sigma_x)


def detectability(theta, problem, target, grad_stats: GradientStats | None = None) -> float:
    """Squared Mahalanobis distance of the target gradient from the mean gradient.

    At ``theta == theta_star`` on linear regression the factorised closed form
    is used; otherwise ``grad_stats`` (exact stats when omitted).
    """
    theta = np.asarray(theta, dtype=float)
    if grad_stats is None and isinstance(problem, LinRegProblem) and np.array_equal(theta, problem.theta_star):
        return detectability_at_optimum(problem, target)
    if grad_stats is None:
        grad_stats = problem.exact_grad_stats(theta)
    dev = target_gradient(theta, problem, target) - grad_stats.mu_g
    return mahalanobis_sq(dev, grad_stats.sigma_g)


def select_target(pool, theta, grad_stats: GradientStats, problem, clip: float | None = None) -> tuple[int, float]:
    """Picks the candidate whose gradient is furthest (Mahalanobis) from the mean.

    Ties go to the lowest index.
    """
    pool = np.atleast_2d(np.asarray(pool, dtype=float))
    if pool.shape[0] == 0 or pool.size == 0:
        raise ValueError("empty candidate pool")
    grads, _ = clip_gradients(problem.grads(np.asarray(theta, dtype=float), pool), clip)
    dev = grads - grad_stats.mu_g
    w = scipy.linalg.solve_triangular(grad_stats.chol, dev.T, lower=True)
    scores = np.einsum("ij,ij->j", w, w)
    best = int(np.argmax(scores))
    return best, float(scores[best])

"""Seeded randomness, special functions and small dense linear algebra.

Every Monte-Carlo round owns an :class:`RngStream` keyed by ``(seed, stream_id)``.
Streams are backed by numpy's counter-based Philox generator seeded through a
``SeedSequence`` spawn key, so splitting is O(1) and results do not depend on
how rounds are scheduled across threads.
"""
from __future__ import annotations

import dataclasses
import math
from collections.abc import Sequence
from typing import Union

import numpy as np
import scipy.linalg
import scipy.special

from seqmi.errors import CovarianceError

_SQRT2 = math.sqrt(2.0)
_U64 = 2**64

# Poisson tail mass left out of the non-central chi-squared mixture.
_NCX2_TAIL = 1e-14


@dataclasses.dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    ``generator(substream)`` returns a fresh generator positioned at the start
    of the requested substream, so calling it twice yields identical draws.
    Substreams let one round keep data sampling, DP noise and crafter
    decisions on separate sequences.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            value = getattr(self, name)
            if not 0 <= int(value) < _U64:
                raise ValueError(f"{name} must be a 64-bit unsigned integer, got {value}")

    def generator(self, substream: int = 0) -> np.random.Generator:
        seq = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id), int(substream)))
        return np.random.Generator(np.random.Philox(seq))

    def child(self, stream_id: int) -> "RngStream":
        return RngStream(self.seed, stream_id)


RandomSource = Union[RngStream, np.random.Generator]


def as_generator(source: RandomSource, substream: int = 0) -> np.random.Generator:
    """Accepts either a stream or an already-positioned generator."""
    if isinstance(source, np.random.Generator):
        return source
    return source.generator(substream)


def _as_matrix(cov, dim: int | None = None) -> np.ndarray:
    arr = np.asarray(cov, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = np.diag(arr)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"covariance must be square, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"covariance has dimension {arr.shape[0]}, expected {dim}")
    return arr


def cholesky(sigma) -> np.ndarray:
    """Lower Cholesky factor; raises :class:`CovarianceError` if not SPD."""
    sigma = _as_matrix(sigma)
    if not np.all(np.isfinite(sigma)):
        raise CovarianceError("covariance not positive definite")
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise CovarianceError("covariance not positive definite") from exc


@dataclasses.dataclass(frozen=True, eq=False)
class GaussianParams:
    """Mean and covariance of a d-dimensional Gaussian.

    A scalar covariance is read as the univariate variance and a 1-D array as
    a diagonal. The all-zero covariance is accepted (degenerate point mass,
    useful for sampling only); anything else must be SPD.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        if mean.ndim != 1:
            raise ValueError("mean must be a vector")
        cov = _as_matrix(self.cov, mean.shape[0])
        scale = max(1.0, float(np.max(np.abs(cov))))
        if np.max(np.abs(cov - cov.T)) > 1e-12 * scale:
            raise CovarianceError("covariance not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_degenerate", not np.any(cov))
        if not self._degenerate:
            object.__setattr__(self, "_chol", cholesky(cov))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def degenerate(self) -> bool:
        return self._degenerate

    @property
    def chol(self) -> np.ndarray:
        if self.degenerate:
            raise CovarianceError("covariance not positive definite")
        return self._chol


def std_normal_cdf(x: float) -> float:
    """Standard normal CDF, accurate to ~1e-16 absolute."""
    if not math.isfinite(x):
        raise ValueError("x must be finite")
    return 0.5 * math.erfc(-x / _SQRT2)


def std_normal_sf(x: float) -> float:
    """Upper tail ``1 - Phi(x)`` without cancellation for large x."""
    return 0.5 * math.erfc(x / _SQRT2)


def log_sum_exp(values: Sequence[float]) -> float:
    """``log(sum(exp(values)))`` with the max-subtraction trick."""
    arr = np.asarray(values, dtype=float).ravel()
    if arr.size == 0:
        raise ValueError("empty statistic list")
    top = float(np.max(arr))
    return top + math.log(float(np.sum(np.exp(arr - top))))


def noncentral_chi2_cdf(x, d: int, lam: float):
    """CDF of the non-central chi-squared distribution.

    Evaluated as the Poisson(lam/2) mixture of central chi-squared CDFs with
    ``d + 2j`` degrees of freedom. Terms are summed outwards from the Poisson
    mode until the neglected weight falls below 1e-14.

    Args:
      x: Evaluation point(s); negative values map to 0.
      d: Degrees of freedom (positive integer).
      lam: Non-centrality (>= 0).

    Returns:
      A float for scalar ``x``, else an array shaped like ``x``.
    """
    if int(d) != d or d < 1:
        raise ValueError("degrees of freedom must be a positive integer")
    if lam < 0 or not math.isfinite(lam):
        raise ValueError("non-centrality must be non-negative")
    xs = np.asarray(x, dtype=float)
    half_x = np.maximum(xs, 0.0) / 2.0
    rate = lam / 2.0
    if rate == 0:
        out = scipy.special.gammainc(d / 2.0, half_x)
    else:
        mode = int(math.floor(rate))

        def weight(j: int) -> float:
            return math.exp(-rate + j * math.log(rate) - math.lgamma(j + 1))

        out = np.zeros_like(half_x)
        # Below the mode weights shrink geometrically, so stopping at a tiny
        # term bounds the neglected lower tail.
        j = mode - 1
        while j >= 0:
            w = weight(j)
            out += w * scipy.special.gammainc(d / 2.0 + j, half_x)
            if w < _NCX2_TAIL * 1e-3:
                break
            j -= 1
        j = mode
        while True:
            w = weight(j)
            out += w * scipy.special.gammainc(d / 2.0 + j, half_x)
            j += 1
            # Geometric bound on the Poisson mass beyond the current term.
            ratio = rate / j
            if ratio < 1.0 and w * ratio / (1.0 - ratio) < _NCX2_TAIL:
                break
        out = np.clip(out, 0.0, 1.0)
    out = np.where(xs <= 0, 0.0, out)
    return float(out) if out.ndim == 0 else out


def mahalanobis_sq(v, sigma) -> float:
    """``v^T sigma^{-1} v`` via a Cholesky solve."""
    v = np.atleast_1d(np.asarray(v, dtype=float))
    chol = cholesky(_as_matrix(sigma, v.shape[0]))
    w = scipy.linalg.solve_triangular(chol, v, lower=True)
    return float(w @ w)


def sample_gaussian(stream: RandomSource, params: GaussianParams, count: int) -> np.ndarray:
    """Draws ``count`` rows from ``params`` (shape ``(count, d)``)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = as_generator(stream)
    if params.degenerate:
        return np.tile(params.mean, (count, 1))
    z = rng.standard_normal((count, params.dim))
    return params.mean + z @ params.chol.T

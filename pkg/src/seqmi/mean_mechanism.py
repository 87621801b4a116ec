"""Sequential empirical-mean mechanism on Gaussian batches.

At step t the mechanism releases the cumulative mean of every sample seen so
far. Consecutive releases expose each batch mean exactly, which is what lets
the sequential tests work on one isolated batch.
"""
from __future__ import annotations

import csv
import dataclasses
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from seqmi.stats_core import GaussianParams, RandomSource, as_generator, sample_gaussian


@dataclasses.dataclass(frozen=True)
class DistributionSchedule:
    """Per-step data distributions ``N(mu_t, Sigma_t)`` for t = 1..T."""

    steps: tuple[GaussianParams, ...]

    def __post_init__(self):
        steps = tuple(self.steps)
        if not steps:
            raise ValueError("schedule needs at least one step")
        dims = {p.dim for p in steps}
        if len(dims) != 1:
            raise ValueError("all steps must share one dimension")
        for p in steps:
            if p.degenerate:
                raise ValueError("schedule covariances must be positive definite")
        object.__setattr__(self, "steps", steps)

    @classmethod
    def stationary(cls, mean, cov, T: int) -> "DistributionSchedule":
        if T < 1:
            raise ValueError("T must be >= 1")
        params = GaussianParams(mean, cov)
        return cls((params,) * T)

    @property
    def T(self) -> int:
        return len(self.steps)

    @property
    def dim(self) -> int:
        return self.steps[0].dim

    def __getitem__(self, t: int) -> GaussianParams:
        """1-based access, matching the time index used everywhere else."""
        if not 1 <= t <= self.T:
            raise IndexError(f"time {t} outside 1..{self.T}")
        return self.steps[t - 1]


@dataclasses.dataclass(frozen=True)
class InsertionSpec:
    """Crafter decision: whether, when and where the target enters.

    ``tau`` and ``J`` are 1-based. They are carried even when ``B == 0``
    (the crafter samples them regardless) but only act when ``B == 1``.
    """

    B: int
    tau: int
    target: np.ndarray
    J: int = 1

    def __post_init__(self):
        if self.B not in (0, 1):
            raise ValueError("B must be 0 or 1")
        object.__setattr__(self, "target", np.atleast_1d(np.asarray(self.target, dtype=float)))

    def validate(self, T: int, n: int, dim: int) -> None:
        if not 1 <= self.tau <= T:
            raise ValueError(f"tau={self.tau} outside 1..{T}")
        if not 1 <= self.J <= n:
            raise ValueError(f"J={self.J} outside 1..{n}")
        if self.target.shape != (dim,):
            raise ValueError(f"target has shape {self.target.shape}, expected ({dim},)")


@dataclasses.dataclass(frozen=True, eq=False)
class MeanTrace:
    """Released cumulative means, one row per step.

    ``n`` is either a constant batch size or one size per step.
    """

    values: np.ndarray
    n: int | tuple[int, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if not isinstance(self.n, (int, np.integer)):
            sizes = tuple(int(k) for k in self.n)
            if len(sizes) != values.shape[0]:
                raise ValueError("need one batch size per step")
            object.__setattr__(self, "n", sizes)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def batch_size(self, t: int) -> int:
        return self.n if isinstance(self.n, (int, np.integer)) else self.n[t - 1]

    def cumulative_counts(self) -> np.ndarray:
        sizes = [self.batch_size(t) for t in range(1, self.T + 1)]
        return np.concatenate([[0], np.cumsum(sizes)]).astype(float)


def trace_from_batch_means(batch_means, n: int | Sequence[int]) -> MeanTrace:
    """Builds the cumulative-mean release from known batch means."""
    means = np.asarray(batch_means, dtype=float)
    if means.ndim == 1:
        means = means[:, None]
    T = means.shape[0]
    sizes = np.full(T, n, dtype=float) if np.isscalar(n) else np.asarray(n, dtype=float)
    totals = np.cumsum(means * sizes[:, None], axis=0)
    values = totals / np.cumsum(sizes)[:, None]
    return MeanTrace(values, n if np.isscalar(n) else tuple(int(k) for k in n))


def run_mean_mechanism(
    schedule: DistributionSchedule,
    n: int,
    insertion: InsertionSpec,
    stream: RandomSource,
    *,
    return_batches: bool = False,
):
    """Samples T batches, inserts the target if requested, releases the trace.

    Args:
      schedule: Data distribution per step.
      n: Batch size (>= 2).
      insertion: Crafter decision. With ``B == 1`` row ``J`` of batch ``tau``
        is overwritten by the target, so the batch keeps size ``n``.
      stream: Randomness for the batch samples.
      return_batches: Also return the raw ``(T, n, d)`` samples.

    Returns:
      The :class:`MeanTrace`, or ``(trace, batches)``.
    """
    if n < 2:
        raise ValueError("batch size must be ≥ 2")
    insertion.validate(schedule.T, n, schedule.dim)
    rng = as_generator(stream)
    batches = np.empty((schedule.T, n, schedule.dim))
    for t in range(1, schedule.T + 1):
        batches[t - 1] = sample_gaussian(rng, schedule[t], n)
    if insertion.B == 1:
        batches[insertion.tau - 1, insertion.J - 1] = insertion.target
    trace = trace_from_batch_means(batches.mean(axis=1), n)
    return (trace, batches) if return_batches else trace


def recover_batch_mean(trace: MeanTrace, t: int) -> np.ndarray:
    """Batch mean of step ``t`` from two consecutive releases (mu_0 = 0)."""
    if not 1 <= t <= trace.T:
        raise ValueError(f"t={t} outside 1..{trace.T}")
    current = trace.values[t - 1]
    previous = trace.values[t - 2] if t > 1 else np.zeros(trace.dim)
    if isinstance(trace.n, (int, np.integer)):
        return t * current - (t - 1) * previous
    counts = trace.cumulative_counts()
    return (counts[t] * current - counts[t - 1] * previous) / trace.batch_size(t)


def recover_all_batch_means(trace: MeanTrace) -> np.ndarray:
    """Vectorised :func:`recover_batch_mean` over t = 1..T, shape ``(T, d)``."""
    if isinstance(trace.n, (int, np.integer)):
        steps = np.arange(1, trace.T + 1, dtype=float)[:, None]
        previous = np.vstack([np.zeros((1, trace.dim)), trace.values[:-1]])
        return steps * trace.values - (steps - 1) * previous
    counts = trace.cumulative_counts()
    totals = trace.values * counts[1:, None]
    prev = np.vstack([np.zeros((1, trace.dim)), totals[:-1]])
    return (totals - prev) / np.diff(counts)[:, None]


def write_trace_csv(trace: MeanTrace, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"dim_{k}" for k in range(trace.dim)])
        for t, row in enumerate(trace.values, start=1):
            writer.writerow([t] + [repr(float(v)) for v in row])


def read_trace_csv(path: str | Path, n: int) -> MeanTrace:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[0] != "t" or not all(h.startswith("dim_") for h in header[1:]):
        raise ValueError(f"unexpected trace header {header}")
    return MeanTrace(np.array([[float(v) for v in r[1:]] for r in body]), n)

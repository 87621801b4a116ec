"""The crafter, the sequential membership-inference game and its error estimates.

A game round draws (B, tau) from the crafter, runs the mechanism once and
evaluates every adversary on that same trace (a paired design). Each round
owns ``RngStream(seed, round_index)``, so records do not depend on thread
count or scheduling.
"""
from __future__ import annotations

import csv
import dataclasses
import math
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Protocol

import numpy as np

from seqmi import mi_tests
from seqmi.mean_mechanism import (
    DistributionSchedule,
    InsertionSpec,
    MeanTrace,
    recover_batch_mean,
    run_mean_mechanism,
)
from seqmi.mi_tests import GaussianLogLR, GradientStats
from seqmi.sgd_mechanism import (
    ParamTrace,
    SgdConfig,
    clip_gradients,
    estimate_grad_stats,
    run_dpsgd,
    run_sgd,
)
from seqmi.stats_core import RngStream

CRAFTER_SUBSTREAM = 2


# --------------------------------------------------------------------------
# Mechanisms


class MeanMechanism:
    """Cumulative empirical mean over Gaussian batches."""

    def __init__(self, schedule: DistributionSchedule, n: int):
        if n < 2:
            raise ValueError("batch size must be ≥ 2")
        self.schedule = schedule
        self.n = n
        self.T = schedule.T

    def batch_size(self, t: int) -> int:
        return self.n

    def run(self, insertion: InsertionSpec, stream: RngStream) -> MeanTrace:
        return run_mean_mechanism(self.schedule, self.n, insertion, stream)


class SgdMechanism:
    """(DP-)SGD on a synthetic problem; DP when the config carries noise or clipping."""

    def __init__(self, problem, config: SgdConfig):
        self.problem = problem
        self.config = config
        self.T = config.T
        self.private = config.noise_multiplier > 0 or config.clip is not None

    def batch_size(self, t: int) -> int:
        return self.config.n(t)

    def run(self, insertion: InsertionSpec, stream: RngStream) -> ParamTrace:
        runner = run_dpsgd if self.private else run_sgd
        return runner(self.problem, self.config, insertion, stream)


# --------------------------------------------------------------------------
# Adversaries


class Adversary(Protocol):
    name: str
    needs_tau: bool

    def __call__(self, trace, tau: int | None) -> float: ...


class SemiStar:
    """Known-tau LR test on the recovered batch mean."""

    needs_tau = True

    def __init__(self, schedule: DistributionSchedule, n: int, target, name: str = mi_tests.SEMI_STAR):
        self.name = name
        self._models = {}
        for t in range(1, schedule.T + 1):
            p = schedule[t]
            self._models[t] = GaussianLogLR(p.mean, p.cov, n, target)

    def __call__(self, trace: MeanTrace, tau: int | None) -> float:
        return self._models[tau](recover_batch_mean(trace, tau))


class _PerTime:
    needs_tau = False

    def __init__(self, schedule: DistributionSchedule, n: int, target):
        self._loglr = mi_tests.ScheduleLogLR(schedule, target, n)

    def per_time(self, trace: MeanTrace) -> np.ndarray:
        return self._loglr(trace)


class SemiUnif(_PerTime):
    name = mi_tests.SEMI_UNIF

    def __call__(self, trace: MeanTrace, tau: int | None) -> float:
        return mi_tests.semi_unif(self.per_time(trace))


class SemiMax(_PerTime):
    name = mi_tests.SEMI_MAX

    def __call__(self, trace: MeanTrace, tau: int | None) -> float:
        return mi_tests.semi_max(self.per_time(trace))


class FinalObservation:
    """LR test on the last release only, against a stationary N(mu, sigma)."""

    name = mi_tests.FINAL_OBSERVATION
    needs_tau = False

    def __init__(self, mu, sigma, n: int, T: int, target):
        self._model = GaussianLogLR(mu, sigma, n * T, target)

    def __call__(self, trace: MeanTrace, tau: int | None) -> float:
        return self._model(trace.values[-1])


class SemiSgd:
    """Known-tau LR test on one parameter update.

    Gradient statistics at ``theta_{tau-1}`` come from the problem's closed
    form (``reference=None``) or are estimated from reference points. With DP
    noise the known per-step noise ``N(0, (sigma_DP C / n)^2 I)`` is folded into
    the per-sample covariance as ``(sigma_DP C)^2 / n * I`` so the Gaussian
    update model stays calibrated; the target gradient and reference
    gradients are clipped like the training run.
    """

    name = mi_tests.SEMI_SGD
    needs_tau = True

    def __init__(self, problem, target, reference=None, ridge: float | None = None,
                 clip: float | None = None, noise_multiplier: float = 0.0):
        self.problem = problem
        self.target = np.atleast_2d(np.asarray(target, dtype=float))
        self.reference = None if reference is None else np.asarray(reference, dtype=float)
        self.ridge = ridge
        self.clip = clip
        self.noise_multiplier = noise_multiplier

    def grad_stats(self, theta, n: int) -> GradientStats:
        if self.reference is None:
            stats = self.problem.exact_grad_stats(theta)
        else:
            stats = estimate_grad_stats(theta, self.reference, self.problem, ridge=self.ridge, clip=self.clip)
        if self.noise_multiplier > 0:
            extra = (self.noise_multiplier * self.clip) ** 2 / n
            stats = GradientStats(stats.mu_g, stats.sigma_g + extra * np.eye(stats.mu_g.shape[0]),
                                  provenance=stats.provenance, ridge=stats.ridge)
        return stats

    def __call__(self, trace: ParamTrace, tau: int | None) -> float:
        theta_prev, theta_next = trace.thetas[tau - 1], trace.thetas[tau]
        n = trace.batch_sizes[tau - 1]
        stats = self.grad_stats(theta_prev, n)
        g_star, _ = clip_gradients(self.problem.grads(theta_prev, self.target), self.clip)
        return mi_tests.semi_sgd(theta_prev, theta_next, trace.learning_rates[tau - 1], n, stats, g_star[0])


class LossBaseline:
    """One of the four loss heuristics, oblivious to tau."""

    needs_tau = False
    KINDS = (mi_tests.DELTA_DIFF, mi_tests.DELTA_RATIO, mi_tests.BACK_FRONT_DIFF, mi_tests.BACK_FRONT_RATIO)

    def __init__(self, kind: str, problem, target):
        if kind not in self.KINDS:
            raise ValueError(f"unknown baseline {kind!r}")
        self.name = kind
        self.problem = problem
        self.target = np.asarray(target, dtype=float).ravel()

    def __call__(self, trace: ParamTrace, tau: int | None) -> float:
        losses = self.problem.path_losses(trace.thetas, self.target)
        return getattr(mi_tests.baseline_statistics(losses), self.name)

    @classmethod
    def all(cls, problem, target) -> list["LossBaseline"]:
        return [cls(kind, problem, target) for kind in cls.KINDS]


# --------------------------------------------------------------------------
# Crafter and game


@dataclasses.dataclass(frozen=True, eq=False)
class CrafterConfig:
    """Membership prior ``nu_B`` (P(B=1)), insertion-time law ``nu_tau`` over 1..T, target."""

    target: np.ndarray
    nu_tau: np.ndarray
    nu_B: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.nu_B <= 1.0:
            raise ValueError("nu_B must lie in [0, 1]")
        weights = np.asarray(self.nu_tau, dtype=float).ravel()
        if weights.size == 0 or np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("nu_tau weights must be non-negative and sum to 1")
        object.__setattr__(self, "nu_tau", weights)
        object.__setattr__(self, "target", np.atleast_1d(np.asarray(self.target, dtype=float)))

    @classmethod
    def fixed_tau(cls, target, tau: int, T: int, nu_B: float = 0.5) -> "CrafterConfig":
        if not 1 <= tau <= T:
            raise ValueError(f"tau={tau} outside 1..{T}")
        weights = np.zeros(T)
        weights[tau - 1] = 1.0
        return cls(target, weights, nu_B)

    @classmethod
    def uniform_tau(cls, target, T: int, nu_B: float = 0.5) -> "CrafterConfig":
        return cls(target, np.full(T, 1.0 / T), nu_B)

    @property
    def T(self) -> int:
        return self.nu_tau.size


def crafter(mechanism, config: CrafterConfig, stream: RngStream):
    """Draws (B, tau), plants the target at a uniform slot if B = 1, runs the mechanism.

    Returns:
      ``(trace, B, tau)``.
    """
    if config.T != mechanism.T:
        raise ValueError("nu_tau length differs from the mechanism horizon")
    rng = stream.generator(CRAFTER_SUBSTREAM)
    B = int(rng.random() < config.nu_B)
    tau = int(rng.choice(config.T, p=config.nu_tau)) + 1
    J = int(rng.integers(1, mechanism.batch_size(tau) + 1))
    trace = mechanism.run(InsertionSpec(B, tau, config.target, J), stream)
    return trace, B, tau


@dataclasses.dataclass(frozen=True)
class RoundRecord:
    round: int
    B: int
    tau: int
    stats: Mapping[str, float]


@dataclasses.dataclass(frozen=True, eq=False)
class GameRecords:
    """Column store of game rounds: indices, membership bits, taus, statistics."""

    rounds: np.ndarray
    B: np.ndarray
    tau: np.ndarray
    stats: dict[str, np.ndarray]

    def __post_init__(self):
        size = len(self.rounds)
        if len(self.B) != size or len(self.tau) != size or any(len(v) != size for v in self.stats.values()):
            raise ValueError("record columns differ in length")
        if not set(np.unique(self.B)) <= {0, 1}:
            raise ValueError("B must be 0/1")

    def __len__(self) -> int:
        return len(self.rounds)

    def __getitem__(self, i: int) -> RoundRecord:
        return RoundRecord(int(self.rounds[i]), int(self.B[i]), int(self.tau[i]),
                           {k: float(v[i]) for k, v in self.stats.items()})

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def adversaries(self) -> list[str]:
        return list(self.stats)

    @property
    def n0(self) -> int:
        return int(np.count_nonzero(self.B == 0))

    @property
    def n1(self) -> int:
        return int(np.count_nonzero(self.B == 1))

    def statistic(self, name: str) -> np.ndarray:
        if name not in self.stats:
            raise KeyError(f"no statistic recorded for adversary {name!r}")
        return self.stats[name]

    def subset(self, mask) -> "GameRecords":
        mask = np.asarray(mask)
        return GameRecords(self.rounds[mask], self.B[mask], self.tau[mask],
                           {k: v[mask] for k, v in self.stats.items()})

    @classmethod
    def from_arrays(cls, B, stats: Mapping[str, Sequence[float]], tau=None) -> "GameRecords":
        B = np.asarray(B, dtype=np.int64)
        tau = np.ones_like(B) if tau is None else np.asarray(tau, dtype=np.int64)
        return cls(np.arange(B.size), B, tau, {k: np.asarray(v, dtype=float) for k, v in stats.items()})

    @classmethod
    def concat(cls, parts: Sequence["GameRecords"]) -> "GameRecords":
        names = parts[0].adversaries
        return cls(np.concatenate([p.rounds for p in parts]), np.concatenate([p.B for p in parts]),
                   np.concatenate([p.tau for p in parts]),
                   {k: np.concatenate([p.stats[k] for p in parts]) for k in names})

    def to_csv(self, path: str | Path) -> None:
        names = self.adversaries
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["round", "B", "tau"] + [f"stat_{k}" for k in names])
            for i in range(len(self)):
                writer.writerow([int(self.rounds[i]), int(self.B[i]), int(self.tau[i])]
                                + [repr(float(self.stats[k][i])) for k in names])

    @classmethod
    def read_csv(cls, path: str | Path) -> "GameRecords":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if header[:3] != ["round", "B", "tau"]:
            raise ValueError(f"unexpected records header {header}")
        cols = list(zip(*body)) if body else [[] for _ in header]
        stats = {h[len("stat_"):]: np.array(c, dtype=float) for h, c in zip(header[3:], cols[3:])}
        return cls(np.array(cols[0], dtype=np.int64), np.array(cols[1], dtype=np.int64),
                   np.array(cols[2], dtype=np.int64), stats)


def _play_rounds(mechanism, adversaries, crafter_config, seed: int, rounds: range) -> GameRecords:
    B = np.empty(len(rounds), dtype=np.int64)
    tau = np.empty(len(rounds), dtype=np.int64)
    stats = {adv.name: np.empty(len(rounds)) for adv in adversaries}
    for i, r in enumerate(rounds):
        trace, b, t = crafter(mechanism, crafter_config, RngStream(seed, r))
        B[i], tau[i] = b, t
        for adv in adversaries:
            stats[adv.name][i] = adv(trace, t if adv.needs_tau else None)
    return GameRecords(np.arange(rounds.start, rounds.stop), B, tau, stats)


def run_semi_game(mechanism, adversaries: Sequence, R: int, crafter_config: CrafterConfig,
                  seed: int, threads: int = 1, first_round: int = 0) -> GameRecords:
    """Plays R rounds and records (B_r, tau_r, statistic per adversary).

    Args:
      mechanism: A :class:`MeanMechanism` or :class:`SgdMechanism`.
      adversaries: Statistic callables; names must be unique. Only those with
        ``needs_tau`` see the true tau.
      R: Number of rounds.
      crafter_config: Membership and insertion-time laws plus target.
      seed: Master seed; round r uses ``RngStream(seed, first_round + r)``.
      threads: Worker threads; results are identical for any value.
      first_round: Offset into the stream index space.
    """
    if R < 1:
        raise ValueError("R must be >= 1")
    names = [adv.name for adv in adversaries]
    if len(set(names)) != len(names):
        raise ValueError("adversary names must be unique")
    threads = max(1, int(threads))
    stop = first_round + R
    if threads == 1:
        return _play_rounds(mechanism, adversaries, crafter_config, seed, range(first_round, stop))
    chunk = math.ceil(R / threads)
    spans = [range(s, min(s + chunk, stop)) for s in range(first_round, stop, chunk)]
    with ThreadPoolExecutor(threads) as pool:
        parts = list(pool.map(lambda span: _play_rounds(mechanism, adversaries, crafter_config, seed, span), spans))
    return GameRecords.concat(parts)


# --------------------------------------------------------------------------
# Error estimates and ROC


@dataclasses.dataclass(frozen=True, eq=False)
class ErrorEstimates:
    gammas: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    n0: int
    n1: int


def _class_stats(records: GameRecords, adversary: str) -> tuple[np.ndarray, np.ndarray]:
    if records.n0 < 1 or records.n1 < 1:
        raise ValueError("need both member and non-member rounds")
    values = records.statistic(adversary)
    return np.sort(values[records.B == 0]), np.sort(values[records.B == 1])


def default_gamma_grid(records: GameRecords, adversary: str) -> np.ndarray:
    """Observed statistic values plus -inf/+inf sentinels."""
    values = np.unique(records.statistic(adversary))
    return np.concatenate([[-np.inf], values, [np.inf]])


def estimate_errors(records: GameRecords, gamma_grid, adversary: str) -> ErrorEstimates:
    """Empirical alpha(g) = P(stat > g | B=0) and beta(g) = P(stat <= g | B=1)."""
    null, alt = _class_stats(records, adversary)
    grid = np.asarray(gamma_grid, dtype=float)
    alpha = (null.size - np.searchsorted(null, grid, side="right")) / null.size
    beta = np.searchsorted(alt, grid, side="right") / alt.size
    return ErrorEstimates(grid, alpha, beta, null.size, alt.size)


@dataclasses.dataclass(frozen=True, eq=False)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    n0: int
    n1: int

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fpr", "tpr"])
            for f, t in zip(self.fpr, self.tpr):
                writer.writerow([repr(float(f)), repr(float(t))])


def roc_curve(records: GameRecords, adversary: str) -> RocCurve:
    """ROC from sweeping the threshold over every observed statistic value."""
    null, alt = _class_stats(records, adversary)
    grid = default_gamma_grid(records, adversary)[::-1]
    fpr = (null.size - np.searchsorted(null, grid, side="right")) / null.size
    tpr = (alt.size - np.searchsorted(alt, grid, side="right")) / alt.size
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, auc, null.size, alt.size)


def tpr_at_fpr(curve: RocCurve, fpr_level: float) -> float:
    """Best TPR among operating points whose FPR does not exceed the level."""
    if not 0.0 < fpr_level < 1.0:
        raise ValueError("fpr_level must lie in (0, 1)")
    return float(np.max(curve.tpr[curve.fpr <= fpr_level]))


def tpr_at_fpr_from_samples(null, alt, fpr_level: float) -> float:
    """Same value as ``tpr_at_fpr(roc_curve(...))`` straight from the two samples.

    The best admissible threshold is the (k+1)-th largest null statistic with
    ``k = floor(fpr_level * N0)``: any smaller threshold lets k+1 nulls through.
    """
    if not 0.0 < fpr_level < 1.0:
        raise ValueError("fpr_level must lie in (0, 1)")
    null = np.sort(np.asarray(null, dtype=float))[::-1]
    alt = np.asarray(alt, dtype=float)
    k = int(math.floor(fpr_level * null.size + 1e-9))
    if k >= null.size:
        return 1.0
    return float(np.count_nonzero(alt > null[k]) / alt.size)


def bootstrap_tpr(records: GameRecords, adversaries: Sequence[str], fpr_level: float,
                  n_boot: int, stream: RngStream) -> np.ndarray:
    """Paired bootstrap of TPR at a fixed FPR, shape ``(n_boot, len(adversaries))``.

    Rounds are resampled within each class, keeping every adversary's
    statistics from the same round together.
    """
    rng = stream.generator()
    idx0 = np.flatnonzero(records.B == 0)
    idx1 = np.flatnonzero(records.B == 1)
    out = np.empty((n_boot, len(adversaries)))
    for b in range(n_boot):
        s0 = rng.choice(idx0, idx0.size)
        s1 = rng.choice(idx1, idx1.size)
        for j, name in enumerate(adversaries):
            values = records.statistic(name)
            out[b, j] = tpr_at_fpr_from_samples(values[s0], values[s1], fpr_level)
    return out


def auc_standard_error(curve: RocCurve) -> float:
    """Hanley-McNeil standard error of an empirical AUC."""
    a = curve.auc
    q1 = a / (2.0 - a)
    q2 = 2.0 * a * a / (1.0 + a)
    var = (a * (1 - a) + (curve.n1 - 1) * (q1 - a * a) + (curve.n0 - 1) * (q2 - a * a)) / (curve.n0 * curve.n1)
    return math.sqrt(max(var, 0.0))

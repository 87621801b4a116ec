"""Experiment pipelines behind the CLI: each is a pure function of (setup, seed).

Cells of a sweep draw disjoint blocks of round streams (``first_round``
offsets), and setup randomness (reference sets, start points) comes from a
reserved stream id, so every table is reproducible from the master seed.
"""
from __future__ import annotations

import dataclasses
import math
from collections.abc import Sequence

import numpy as np

from seqmi import error_theory as et
from seqmi import mi_tests
from seqmi.auditor import AuditOutcome, epsilon_lower_bound, noise_multiplier_for_epsilon
from seqmi.game import (
    CrafterConfig,
    FinalObservation,
    GameRecords,
    LossBaseline,
    MeanMechanism,
    RocCurve,
    SemiMax,
    SemiSgd,
    SemiStar,
    SemiUnif,
    SgdMechanism,
    auc_standard_error,
    crafter,
    estimate_errors,
    roc_curve,
    run_semi_game,
    tpr_at_fpr,
)
from seqmi.mean_mechanism import DistributionSchedule
from seqmi.mi_tests import GaussianLogLR
from seqmi.sgd_mechanism import (
    LinRegProblem,
    LogRegProblem,
    SgdConfig,
    estimate_grad_stats,
    perturbed_start,
    select_target,
)
from seqmi.stats_core import RngStream

SETUP_STREAM = 2**64 - 1
MEAN_ADVERSARIES = (mi_tests.SEMI_STAR, mi_tests.SEMI_UNIF, mi_tests.SEMI_MAX, mi_tests.FINAL_OBSERVATION)


def binomial_se(p: float, count: int) -> float:
    return math.sqrt(max(p * (1.0 - p), 0.0) / count)


# --------------------------------------------------------------------------
# Gaussian mean mechanism


@dataclasses.dataclass(frozen=True)
class MeanSetup:
    """Stationary N(0, I) batches (diagonal ``scales`` if given), target at Mahalanobis sqrt(m_star)."""

    n: int = 10
    m_star: float = 9.0
    T: int = 10
    tau: int = 5
    d: int = 1
    alpha: float = 0.01
    scales: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be ≥ 2")
        if self.m_star < 0:
            raise ValueError("m_star must be non-negative")
        if self.T < 1 or not 1 <= self.tau <= self.T:
            raise ValueError("need 1 <= tau <= T")
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.scales is not None and (len(self.scales) != self.d or min(self.scales) <= 0):
            raise ValueError("scales must be d positive variances")

    def replace(self, **changes) -> "MeanSetup":
        return dataclasses.replace(self, **changes)

    @property
    def cov(self) -> np.ndarray:
        return np.diag(self.scales) if self.scales is not None else np.eye(self.d)

    @property
    def mean(self) -> np.ndarray:
        return np.zeros(self.d)

    @property
    def target(self) -> np.ndarray:
        # Equal whitened weight on every coordinate.
        direction = np.full(self.d, 1.0 / math.sqrt(self.d))
        return math.sqrt(self.m_star) * np.sqrt(np.diag(self.cov)) * direction

    def schedule(self) -> DistributionSchedule:
        return DistributionSchedule.stationary(self.mean, self.cov, self.T)

    def mechanism(self) -> MeanMechanism:
        return MeanMechanism(self.schedule(), self.n)

    def adversaries(self, names: Sequence[str] = MEAN_ADVERSARIES) -> list:
        schedule, target = self.schedule(), self.target
        build = {
            mi_tests.SEMI_STAR: lambda: SemiStar(schedule, self.n, target),
            mi_tests.SEMI_UNIF: lambda: SemiUnif(schedule, self.n, target),
            mi_tests.SEMI_MAX: lambda: SemiMax(schedule, self.n, target),
            mi_tests.FINAL_OBSERVATION: lambda: FinalObservation(self.mean, self.cov, self.n, self.T, target),
        }
        return [build[name]() for name in names]

    def crafter_config(self, uniform: bool = False, nu_B: float = 0.5) -> CrafterConfig:
        if uniform:
            return CrafterConfig.uniform_tau(self.target, self.T, nu_B)
        return CrafterConfig.fixed_tau(self.target, self.tau, self.T, nu_B)


def mean_game(setup: MeanSetup, rounds: int, seed: int, *, names: Sequence[str] = MEAN_ADVERSARIES,
              uniform: bool = False, first_round: int = 0, threads: int = 1) -> GameRecords:
    return run_semi_game(setup.mechanism(), setup.adversaries(names), rounds, setup.crafter_config(uniform),
                         seed, threads=threads, first_round=first_round)


def closed_form_powers(setup: MeanSetup) -> dict[str, float]:
    n, m, T, a = setup.n, setup.m_star, setup.T, setup.alpha
    return {
        mi_tests.SEMI_STAR: et.power_semi_star(a, n, m),
        mi_tests.SEMI_MAX: et.power_glr(a, n, m, T),
        mi_tests.FINAL_OBSERVATION: et.power_fo(a, n, T, m),
    }


def _power_row(setup: MeanSetup, records: GameRecords) -> dict:
    row = {}
    closed = closed_form_powers(setup)
    for name in MEAN_ADVERSARIES:
        row[f"{name}_cf"] = closed.get(name, math.nan)
    for name in MEAN_ADVERSARIES:
        tpr = tpr_at_fpr(roc_curve(records, name), setup.alpha)
        row[f"{name}_mc"] = tpr
        row[f"{name}_se"] = binomial_se(tpr, records.n1)
    return row


def power_vs_T(setup: MeanSetup, T_grid: Sequence[int], rounds: int, seed: int, threads: int = 1) -> list[dict]:
    """TPR at FPR = alpha for every test, closed form where one exists; tau = min(tau, T)."""
    rows = []
    for k, T in enumerate(T_grid):
        cell = setup.replace(T=T, tau=min(setup.tau, T))
        rows.append({"T": T} | _power_row(cell, mean_game(cell, rounds, seed, first_round=k * rounds,
                                                          threads=threads)))
    return rows


def power_vs_mstar(setup: MeanSetup, m_grid: Sequence[float], rounds: int, seed: int,
                   threads: int = 1, block: int = 0) -> list[dict]:
    rows = []
    for k, m in enumerate(m_grid):
        cell = setup.replace(m_star=m)
        offset = (block + k) * rounds
        rows.append({"m_star": m} | _power_row(cell, mean_game(cell, rounds, seed, first_round=offset,
                                                               threads=threads)))
    return rows


def closed_form_curves(setup: MeanSetup, gammas) -> dict[str, et.ErrorCurve]:
    return {
        kind: et.error_curve(kind, gammas, setup.n, setup.m_star, setup.T)
        for kind in (mi_tests.SEMI_STAR, mi_tests.FINAL_OBSERVATION, mi_tests.SEMI_MAX)
    }


def roc_experiment(setup: MeanSetup, rounds: int, seed: int, uniform: bool = False,
                   threads: int = 1) -> tuple[GameRecords, dict[str, RocCurve]]:
    records = mean_game(setup, rounds, seed, uniform=uniform, threads=threads)
    return records, {name: roc_curve(records, name) for name in records.adversaries}


def roc_summary(curves: dict[str, RocCurve], fpr_level: float) -> list[dict]:
    return [
        {"adversary": name, "auc": c.auc, "auc_se": auc_standard_error(c),
         "tpr_at_fpr": tpr_at_fpr(c, fpr_level), "n0": c.n0, "n1": c.n1}
        for name, c in curves.items()
    ]


def tau_sweep(setup: MeanSetup, taus: Sequence[int], rounds: int, seed: int, threads: int = 1) -> list[dict]:
    """Known-tau power at the closed-form alpha threshold for each insertion time."""
    gamma = et.threshold_for_alpha(setup.alpha, setup.n, setup.m_star)
    closed = et.power_semi_star(setup.alpha, setup.n, setup.m_star)
    rows = []
    for k, tau in enumerate(taus):
        cell = setup.replace(tau=tau)
        records = mean_game(cell, rounds, seed, names=(mi_tests.SEMI_STAR,), first_round=k * rounds,
                            threads=threads)
        est = estimate_errors(records, [gamma], mi_tests.SEMI_STAR)
        power = 1.0 - float(est.beta[0])
        rows.append({"tau": tau, "gamma": gamma, "alpha_mc": float(est.alpha[0]),
                     "power_mc": power, "power_se": binomial_se(power, est.n1), "power_cf": closed})
    return rows


def multivariate_power(setup: MeanSetup, d_grid: Sequence[int], rounds: int, seed: int,
                       threads: int = 1) -> list[dict]:
    """Known-tau power at FPR alpha against dimension, diagonal covariance, fixed m_star."""
    rows = []
    for k, d in enumerate(d_grid):
        cell = setup.replace(d=d, scales=tuple(np.linspace(0.5, 2.0, d)) if d > 1 else None)
        records = mean_game(cell, rounds, seed, names=(mi_tests.SEMI_STAR,), first_round=k * rounds,
                            threads=threads)
        gamma = et.threshold_for_alpha_mv(cell.alpha, cell.n, d, cell.m_star)
        est = estimate_errors(records, [gamma], mi_tests.SEMI_STAR)
        power = 1.0 - float(est.beta[0])
        rows.append({
            "d": d,
            "gamma": gamma,
            "alpha_mc": float(est.alpha[0]),
            "alpha_se": binomial_se(cell.alpha, est.n0),
            "power_mc": power,
            "power_se": binomial_se(power, est.n1),
            "tpr_at_fpr": tpr_at_fpr(roc_curve(records, mi_tests.SEMI_STAR), cell.alpha),
        })
    return rows


def lr_trace(setup: MeanSetup, rounds: int, seed: int) -> list[dict]:
    """Per-update log-LR of the known-tau and final-observation tests under both hypotheses.

    After t updates the known-tau adversary has nothing before tau (statistic
    0) and the fixed batch-tau log-LR afterwards; the final-observation
    adversary uses the t-th cumulative mean with batch size n*t.
    """
    schedule = setup.schedule()
    star = SemiStar(schedule, setup.n, setup.target)
    fo = [GaussianLogLR(setup.mean, setup.cov, setup.n * t, setup.target) for t in range(1, setup.T + 1)]
    mech = setup.mechanism()
    out = {}
    for hyp, nu_B in (("h0", 0.0), ("h1", 1.0)):
        cfg = setup.crafter_config(nu_B=nu_B)
        star_paths = np.zeros((rounds, setup.T))
        fo_paths = np.empty((rounds, setup.T))
        offset = 0 if hyp == "h0" else rounds
        for r in range(rounds):
            trace, _, tau = crafter(mech, cfg, RngStream(seed, offset + r))
            star_paths[r, tau - 1:] = star(trace, tau)
            fo_paths[r] = [fo[t](trace.values[t]) for t in range(setup.T)]
        out[hyp] = (star_paths, fo_paths)
    rows = []
    for t in range(setup.T):
        row = {"t": t + 1}
        for hyp, (sp, fp) in out.items():
            row[f"{hyp}_semi_star_mean"] = float(sp[:, t].mean())
            row[f"{hyp}_semi_star_sd"] = float(sp[:, t].std(ddof=1))
            row[f"{hyp}_final_observation_mean"] = float(fp[:, t].mean())
            row[f"{hyp}_final_observation_sd"] = float(fp[:, t].std(ddof=1))
        rows.append(row)
    return rows


# --------------------------------------------------------------------------
# SGD on linear regression


@dataclasses.dataclass(frozen=True)
class LinRegSetup:
    """Isotropic-design linear regression with an outlier canary along the first axis."""

    d: int = 5
    T: int = 10
    n: int = 50
    eta: float = 0.05
    tau: int = 5
    sigma_eps2: float = 1.0
    target_scale: float = 2.0
    target_residual: float = 3.0

    def __post_init__(self):
        if self.d < 1 or self.T < 1 or not 1 <= self.tau <= self.T:
            raise ValueError("need d >= 1 and 1 <= tau <= T")
        if self.n < 2:
            raise ValueError("n must be ≥ 2")
        if self.eta <= 0 or self.sigma_eps2 <= 0:
            raise ValueError("eta and sigma_eps2 must be positive")

    def build(self, seed: int):
        rng = RngStream(seed, SETUP_STREAM).generator()
        theta_star = np.ones(self.d)
        problem = LinRegProblem(theta_star, np.eye(self.d), self.sigma_eps2)
        x = np.zeros(self.d)
        x[0] = self.target_scale
        y = theta_star @ x + self.target_residual * math.sqrt(self.sigma_eps2)
        config = SgdConfig(T=self.T, batch_size=self.n, learning_rate=self.eta,
                           theta0=perturbed_start(theta_star, rng))
        return problem, config, np.r_[x, y]


def sgd_sim(setup: LinRegSetup, rounds: int, seed: int, threads: int = 1):
    """SeMI^SGD (exact gradient statistics) against the loss baselines on one game."""
    problem, config, target = setup.build(seed)
    adversaries = [SemiSgd(problem, target)] + LossBaseline.all(problem, target)
    records = run_semi_game(SgdMechanism(problem, config), adversaries, rounds,
                            CrafterConfig.fixed_tau(target, setup.tau, setup.T), seed, threads=threads)
    return records, {name: roc_curve(records, name) for name in records.adversaries}


# --------------------------------------------------------------------------
# DP-SGD audit on logistic regression


@dataclasses.dataclass(frozen=True)
class AuditSetup:
    """Full-batch DP-SGD on logistic regression with one low-variance feature.

    The canary is chosen from axis-aligned outliers by clipped-gradient
    Mahalanobis distance at theta_0 = theta_star, estimated from the
    reference set.
    """

    d: int = 5
    T: int = 10
    n: int = 64
    eta: float = 0.5
    clip: float = 1.0
    delta: float = 1e-4
    xi: float = 0.05
    epsilons: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    taus: tuple[int, ...] | None = None
    reference_size: int = 4096
    low_variance: float = 0.01

    def __post_init__(self):
        if self.d < 2 or self.T < 1 or self.n < 2:
            raise ValueError("need d >= 2, T >= 1, n >= 2")
        if self.eta <= 0 or self.clip <= 0:
            raise ValueError("eta and clip must be positive")
        if not 0 < self.delta < 1 or not 0 < self.xi < 1:
            raise ValueError("delta and xi must lie in (0, 1)")
        if any(not (e > 0) for e in self.epsilons):
            raise ValueError("epsilons must be positive (inf means no noise)")
        if self.reference_size < 2:
            raise ValueError("reference_size must be >= 2")
        for tau in self.tau_grid:
            if not 1 <= tau <= self.T:
                raise ValueError(f"tau={tau} outside 1..{self.T}")

    @property
    def tau_grid(self) -> tuple[int, ...]:
        return tuple(range(1, self.T + 1)) if self.taus is None else tuple(self.taus)

    def build(self, seed: int):
        rng = RngStream(seed, SETUP_STREAM).generator()
        theta_star = np.zeros(self.d)
        theta_star[:3] = (1.0, -1.0, 0.5)[: min(3, self.d)]
        variances = np.ones(self.d)
        variances[-1] = self.low_variance
        problem = LogRegProblem(theta_star, np.diag(variances))
        reference = problem.sample(rng, self.reference_size)
        pool = np.array([np.r_[c * np.eye(self.d)[k], y]
                         for k in range(self.d) for c in (2.0, 4.0, 8.0) for y in (0.0, 1.0)])
        stats = estimate_grad_stats(theta_star, reference, problem, clip=self.clip)
        index, m_star = select_target(pool, theta_star, stats, problem, clip=self.clip)
        return problem, reference, pool[index], m_star


@dataclasses.dataclass(frozen=True)
class AuditCell:
    epsilon_true: float
    noise_multiplier: float
    tau: int
    adversary: str
    outcome: AuditOutcome


def dpsgd_audit(setup: AuditSetup, rounds: int, seed: int, threads: int = 1) -> tuple[list[AuditCell], dict]:
    """epsilon lower bounds for every (epsilon_true, tau, adversary) cell."""
    problem, reference, target, m_star = setup.build(seed)
    cells = []
    block = 0
    for eps in setup.epsilons:
        sigma = 0.0 if math.isinf(eps) else noise_multiplier_for_epsilon(eps, setup.T, setup.delta)
        config = SgdConfig(T=setup.T, batch_size=setup.n, learning_rate=setup.eta,
                           theta0=problem.theta_star, clip=setup.clip, noise_multiplier=sigma)
        adversaries = [SemiSgd(problem, target, reference=reference, clip=setup.clip, noise_multiplier=sigma)]
        adversaries += LossBaseline.all(problem, target)
        mech = SgdMechanism(problem, config)
        for tau in setup.tau_grid:
            records = run_semi_game(mech, adversaries, rounds, CrafterConfig.fixed_tau(target, tau, setup.T),
                                    seed, threads=threads, first_round=block * rounds)
            block += 1
            for adv in adversaries:
                outcome = epsilon_lower_bound(records, adv.name, setup.delta, setup.xi)
                cells.append(AuditCell(eps, sigma, tau, adv.name, outcome))
    meta = {"target": [float(v) for v in target], "target_m_star": m_star}
    return cells, meta


def audit_summary(cells: Sequence[AuditCell]) -> list[dict]:
    """Mean and max over tau of the epsilon lower bound per (epsilon_true, adversary)."""
    groups: dict[tuple[float, str], list[AuditCell]] = {}
    for cell in cells:
        groups.setdefault((cell.epsilon_true, cell.adversary), []).append(cell)
    rows = []
    for (eps, adv), items in groups.items():
        values = np.array([c.outcome.epsilon_lb for c in items])
        rows.append({"epsilon_true": eps, "noise_multiplier": items[0].noise_multiplier, "adversary": adv,
                     "mean_over_tau": float(values.mean()), "max_over_tau": float(values.max()),
                     "best_tau": int(items[int(np.argmax(values))].tau), "n_tau": len(items)})
    return rows

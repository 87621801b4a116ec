"""Command-line front end.

Configuration is an INI file with sections ``[run]``, ``[mean]``, ``[sgd]``
and ``[audit]``; command-line flags override ``[run]``. Every field is
validated before any computation, and outputs are staged in a temporary
directory that only replaces ``<out>/<experiment>/<label>/`` on success.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import json
import math
import shutil
import sys
import tempfile
from collections.abc import Callable, Sequence
from pathlib import Path

import numpy as np

from seqmi import error_theory as et
from seqmi import experiments as ex
from seqmi.errors import ConfigError, CovarianceError
from seqmi.game import crafter, CrafterConfig, SgdMechanism
from seqmi.sgd_mechanism import write_param_trace_csv
from seqmi.stats_core import RngStream

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

COMMANDS = ("mean-power", "roc", "uniform-tau", "multivariate", "sgd-sim", "dpsgd-audit", "lr-trace", "tau-sweep")


# --------------------------------------------------------------------------
# Config schema


def _int_list(text: str) -> tuple[int, ...]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return tuple(out)


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(",") if p.strip())


@dataclasses.dataclass(frozen=True)
class Field:
    parse: Callable[[str], object]
    default: str
    check: Callable[[object], bool] = lambda v: True
    rule: str = ""


def _pos(v) -> bool:
    return v > 0


def _all(pred):
    return lambda values: len(values) > 0 and all(pred(v) for v in values)


SCHEMA: dict[str, dict[str, Field]] = {
    "run": {
        "seed": Field(int, "0", lambda v: 0 <= v < 2**64, "must be a 64-bit unsigned integer"),
        "rounds": Field(int, "2000", lambda v: v >= 2, "must be >= 2"),
        "threads": Field(int, "1", lambda v: v >= 1, "must be >= 1"),
        "out": Field(str, "results", lambda v: bool(v), "must be non-empty"),
        "label": Field(str, "", lambda v: "/" not in v, "must not contain '/'"),
    },
    "mean": {
        "n": Field(int, "10", lambda v: v >= 2, "must be >= 2"),
        "m_star": Field(float, "9", lambda v: v >= 0, "must be >= 0"),
        "T": Field(int, "10", lambda v: v >= 1, "must be >= 1"),
        "tau": Field(int, "5", lambda v: v >= 1, "must be >= 1"),
        "alpha": Field(float, "0.01", lambda v: 0 < v < 1, "must lie in (0, 1)"),
        "T_grid": Field(_int_list, "1..10", _all(lambda v: v >= 1), "must be positive integers"),
        "m_star_grid": Field(_float_list, "1,4,9,16,25", _all(lambda v: v >= 0), "must be non-negative"),
        "d_grid": Field(_int_list, "2,10,50", _all(lambda v: v >= 1), "must be positive integers"),
        "taus": Field(_int_list, "1..10", _all(lambda v: v >= 1), "must be positive integers"),
        "gamma_points": Field(int, "200", lambda v: v >= 2, "must be >= 2"),
    },
    "sgd": {
        "d": Field(int, "5", lambda v: v >= 1, "must be >= 1"),
        "T": Field(int, "10", lambda v: v >= 1, "must be >= 1"),
        "n": Field(int, "50", lambda v: v >= 2, "must be >= 2"),
        "eta": Field(float, "0.05", _pos, "must be > 0"),
        "tau": Field(int, "5", lambda v: v >= 1, "must be >= 1"),
        "sigma_eps2": Field(float, "1", _pos, "must be > 0"),
        "target_scale": Field(float, "2", lambda v: True),
        "target_residual": Field(float, "3", lambda v: True),
        "fpr": Field(float, "0.01", lambda v: 0 < v < 1, "must lie in (0, 1)"),
    },
    "audit": {
        "d": Field(int, "5", lambda v: v >= 2, "must be >= 2"),
        "T": Field(int, "10", lambda v: v >= 1, "must be >= 1"),
        "n": Field(int, "64", lambda v: v >= 2, "must be >= 2"),
        "eta": Field(float, "0.5", _pos, "must be > 0"),
        "clip": Field(float, "1", lambda v: 0 < v < math.inf, "must be finite and > 0"),
        "delta": Field(float, "1e-4", lambda v: 0 < v < 1, "must lie in (0, 1)"),
        "xi": Field(float, "0.05", lambda v: 0 < v < 1, "must lie in (0, 1)"),
        "epsilons": Field(_float_list, "0.5,1,2,4", _all(_pos), "must be positive (inf for no noise)"),
        "taus": Field(_int_list, "", lambda v: True),
        "reference_size": Field(int, "4096", lambda v: v >= 2, "must be >= 2"),
        "low_variance": Field(float, "0.01", _pos, "must be > 0"),
    },
}


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    values: dict[str, dict[str, object]]
    raw: dict[str, dict[str, str]]

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    @property
    def rounds(self) -> int:
        return self.values["run"]["rounds"]

    @property
    def threads(self) -> int:
        return self.values["run"]["threads"]

    def effective(self) -> dict:
        """Everything that can change results; output location and threads cannot."""
        payload = {s: dict(sorted(v.items())) for s, v in sorted(self.raw.items()) if s != "run"}
        payload["run"] = {k: self.raw["run"][k] for k in ("seed", "rounds")}
        return payload

    def digest(self) -> str:
        payload = self.effective() | {"experiment": self.experiment}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def load_config(experiment: str, path: str | None, overrides: dict[str, str]) -> ExperimentConfig:
    """Reads the INI file, applies flag overrides and validates every field."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    if path is not None:
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(section, "unknown section")
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"{section}.{key}", "unknown key")
    raw: dict[str, dict[str, str]] = {}
    values: dict[str, dict[str, object]] = {}
    for section, fields in SCHEMA.items():
        raw[section], values[section] = {}, {}
        for key, spec in fields.items():
            text = parser.get(section, key, fallback=spec.default)
            if section == "run" and overrides.get(key) is not None:
                text = str(overrides[key])
            name = f"{section}.{key}"
            if not text.strip() and spec.default.strip():
                raise ConfigError(name, "missing")
            try:
                value = spec.parse(text)
            except ValueError as exc:
                raise ConfigError(name, f"cannot parse {text!r}") from exc
            if not spec.check(value):
                raise ConfigError(name, spec.rule or "invalid value")
            raw[section][key] = text
            values[section][key] = value
    cfg = ExperimentConfig(experiment, values, raw)
    _cross_check(cfg)
    return cfg


def _cross_check(cfg: ExperimentConfig) -> None:
    mean, sgd, audit = cfg["mean"], cfg["sgd"], cfg["audit"]
    if mean["tau"] > mean["T"]:
        raise ConfigError("mean.tau", f"must be <= mean.T = {mean['T']}")
    if max(mean["taus"]) > mean["T"]:
        raise ConfigError("mean.taus", f"must be <= mean.T = {mean['T']}")
    if sgd["tau"] > sgd["T"]:
        raise ConfigError("sgd.tau", f"must be <= sgd.T = {sgd['T']}")
    if audit["taus"] and max(audit["taus"]) > audit["T"]:
        raise ConfigError("audit.taus", f"must be <= audit.T = {audit['T']}")
    for section, build in (("mean", mean_setup), ("sgd", linreg_setup), ("audit", audit_setup)):
        try:
            build(cfg)
        except ValueError as exc:
            raise ConfigError(section, str(exc)) from exc


def mean_setup(cfg: ExperimentConfig) -> ex.MeanSetup:
    m = cfg["mean"]
    return ex.MeanSetup(n=m["n"], m_star=m["m_star"], T=m["T"], tau=m["tau"], alpha=m["alpha"])


def linreg_setup(cfg: ExperimentConfig) -> ex.LinRegSetup:
    s = cfg["sgd"]
    return ex.LinRegSetup(d=s["d"], T=s["T"], n=s["n"], eta=s["eta"], tau=s["tau"], sigma_eps2=s["sigma_eps2"],
                          target_scale=s["target_scale"], target_residual=s["target_residual"])


def audit_setup(cfg: ExperimentConfig) -> ex.AuditSetup:
    a = cfg["audit"]
    return ex.AuditSetup(d=a["d"], T=a["T"], n=a["n"], eta=a["eta"], clip=a["clip"], delta=a["delta"],
                         xi=a["xi"], epsilons=a["epsilons"], taus=a["taus"] or None,
                         reference_size=a["reference_size"], low_variance=a["low_variance"])


# --------------------------------------------------------------------------
# Output helpers


def _cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_rows(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(rows[0]))
        for row in rows:
            writer.writerow([_cell(v) for v in row.values()])


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else repr(value)
    if isinstance(value, np.integer):
        return int(value)
    return value


def write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# Commands; each writes into ``out`` and returns nothing.


def cmd_mean_power(cfg: ExperimentConfig, out: Path) -> None:
    setup = mean_setup(cfg)
    m = cfg["mean"]
    rows_T = ex.power_vs_T(setup, m["T_grid"], cfg.rounds, cfg.seed, cfg.threads)
    rows_m = ex.power_vs_mstar(setup, m["m_star_grid"], cfg.rounds, cfg.seed, cfg.threads,
                               block=len(m["T_grid"]))
    write_rows(out / "power_vs_T.csv", rows_T)
    write_rows(out / "power_vs_mstar.csv", rows_m)
    gammas = np.linspace(-5.0, et.gamma_max(setup.n, setup.m_star), m["gamma_points"])
    for kind, curve in ex.closed_form_curves(setup, gammas).items():
        curve.to_csv(out / f"power_curve_{kind}.csv")


def _roc_outputs(records, curves, out: Path, fpr: float) -> None:
    records.to_csv(out / "records.csv")
    for name, curve in curves.items():
        curve.to_csv(out / f"roc_{name}.csv")
    write_rows(out / "summary.csv", ex.roc_summary(curves, fpr))


def cmd_roc(cfg: ExperimentConfig, out: Path, uniform: bool = False) -> None:
    setup = mean_setup(cfg)
    records, curves = ex.roc_experiment(setup, cfg.rounds, cfg.seed, uniform=uniform, threads=cfg.threads)
    _roc_outputs(records, curves, out, setup.alpha)


def cmd_uniform_tau(cfg: ExperimentConfig, out: Path) -> None:
    cmd_roc(cfg, out, uniform=True)


def cmd_multivariate(cfg: ExperimentConfig, out: Path) -> None:
    rows = ex.multivariate_power(mean_setup(cfg), cfg["mean"]["d_grid"], cfg.rounds, cfg.seed, cfg.threads)
    write_rows(out / "power_vs_d.csv", rows)


def cmd_tau_sweep(cfg: ExperimentConfig, out: Path) -> None:
    rows = ex.tau_sweep(mean_setup(cfg), cfg["mean"]["taus"], cfg.rounds, cfg.seed, cfg.threads)
    write_rows(out / "tau_sweep.csv", rows)


def cmd_lr_trace(cfg: ExperimentConfig, out: Path) -> None:
    write_rows(out / "lr_trace.csv", ex.lr_trace(mean_setup(cfg), cfg.rounds, cfg.seed))


def cmd_sgd_sim(cfg: ExperimentConfig, out: Path) -> None:
    setup = linreg_setup(cfg)
    records, curves = ex.sgd_sim(setup, cfg.rounds, cfg.seed, cfg.threads)
    _roc_outputs(records, curves, out, cfg["sgd"]["fpr"])
    problem, config, target = setup.build(cfg.seed)
    trace, _, _ = crafter(SgdMechanism(problem, config), CrafterConfig.fixed_tau(target, setup.tau, setup.T),
                          RngStream(cfg.seed, 0))
    write_param_trace_csv(trace, out / "trace_round0.csv")


def cmd_dpsgd_audit(cfg: ExperimentConfig, out: Path) -> None:
    setup = audit_setup(cfg)
    cells, meta = ex.dpsgd_audit(setup, cfg.rounds, cfg.seed, cfg.threads)
    rows = []
    for c in cells:
        rows.append({"epsilon_true": c.epsilon_true, "noise_multiplier": c.noise_multiplier, "tau": c.tau,
                     "adversary": c.adversary} | c.outcome.to_dict())
    write_rows(out / "cells.csv", rows)
    write_rows(out / "summary.csv", ex.audit_summary(cells))
    write_json(out / "audit.json", {"meta": meta, "cells": rows})


HANDLERS: dict[str, Callable[[ExperimentConfig, Path], None]] = {
    "mean-power": cmd_mean_power,
    "roc": cmd_roc,
    "uniform-tau": cmd_uniform_tau,
    "multivariate": cmd_multivariate,
    "sgd-sim": cmd_sgd_sim,
    "dpsgd-audit": cmd_dpsgd_audit,
    "lr-trace": cmd_lr_trace,
    "tau-sweep": cmd_tau_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqmi", description="Sequential membership-inference experiments.")
    parser.add_argument("--config", help="INI file with [run], [mean], [sgd], [audit] sections")
    parser.add_argument("--seed", type=str, help="master seed (u64)")
    parser.add_argument("--rounds", type=str, help="game rounds per cell")
    parser.add_argument("--out", type=str, help="output root directory")
    parser.add_argument("--threads", type=str, help="worker threads (results do not depend on it)")
    parser.add_argument("--label", type=str, help="run directory name (default seed-<seed>)")
    parser.add_argument("command", choices=COMMANDS)
    return parser


def run(experiment: str, cfg: ExperimentConfig) -> Path:
    """Executes one experiment and atomically publishes its directory."""
    run_cfg = cfg["run"]
    label = run_cfg["label"] or f"seed-{cfg.seed}"
    parent = Path(run_cfg["out"]) / experiment
    parent.mkdir(parents=True, exist_ok=True)
    final = parent / label
    staging = Path(tempfile.mkdtemp(prefix=f".{label}-", dir=parent))
    try:
        HANDLERS[experiment](cfg, staging)
        files = sorted(p.name for p in staging.iterdir())
        write_json(staging / "manifest.json", {
            "experiment": experiment,
            "seed": cfg.seed,
            "rounds": cfg.rounds,
            "config_sha256": cfg.digest(),
            "config": cfg.effective(),
            "files": files,
        })
        if final.exists():
            shutil.rmtree(final)
        staging.rename(final)
    finally:
        if staging.exists():
            shutil.rmtree(staging)
    return final


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: getattr(args, k) for k in ("seed", "rounds", "out", "threads", "label")}
    try:
        cfg = load_config(args.command, args.config, overrides)
        final = run(args.command, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, CovarianceError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(final)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Consistency experiment: optimality-gap quantiles along a sample-size schedule.

Each replication ("path") draws one long demand stream; every sample size
in the schedule reuses the stream's prefix (nested-sample design) and every
holding cost and rule sees the identical prefix (common random numbers).
Per-path seeds are derived from the master seed with an avalanche mix, so
any execution order or degree of parallelism produces byte-identical
results.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import partial
from pathlib import Path

import numpy as np

from . import __version__
from .decisions import (
    Rule,
    decide_with_variational,
    lcvb_decide,
    optimality_gap,
)
from .model import NewsvendorModel, sample_demand
from .numerics import NumericalError
from .oracle import bayes_decision, build_posterior
from .vb import FitSettings, fit_nvb

__all__ = [
    "ExperimentConfig",
    "GapRecord",
    "CurvePoint",
    "QuantileCurve",
    "reference_config",
    "derive_path_seed",
    "simulate_path",
    "run_experiment",
    "nearest_rank_quantile",
    "estimate_rate",
    "write_results",
    "read_results",
]

logger = logging.getLogger(__name__)

CSV_HEADER = "rule,h,n,quantile_level,gap_action_q,gap_regret_q,replications,failures"

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class ExperimentConfig:
    theta0: float
    b: float
    alpha: float
    beta: float
    h_values: tuple[float, ...]
    n_schedule: tuple[int, ...]
    replications: int
    quantile_level: float
    master_seed: int
    rules: tuple[Rule, ...]
    action_interval: tuple[float, float] = (0.0, 50.0)
    posterior_nodes: int = 256

    def __post_init__(self):
        if not self.h_values or any(h <= 0 for h in self.h_values):
            raise ValueError("h_values must be non-empty and positive")
        if not self.n_schedule or any(n < 1 for n in self.n_schedule):
            raise ValueError("n_schedule must be non-empty with n >= 1")
        if any(b >= a for a, b in zip(self.n_schedule[1:], self.n_schedule)):
            raise ValueError("n_schedule must be strictly increasing")
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if not 0.0 < self.quantile_level < 1.0:
            raise ValueError("quantile_level must lie in (0, 1)")
        if not self.rules:
            raise ValueError("at least one decision rule is required")
        if len(set(self.rules)) != len(self.rules):
            raise ValueError("rules must be distinct")
        allowed_rules = {Rule.NVB, Rule.LCVB, Rule.BAYES}
        for rule in self.rules:
            if rule not in allowed_rules:
                raise ValueError(f"rule {rule.value} cannot be simulated")
        # Validate the model once per holding cost; raises on a bad interval.
        for h in self.h_values:
            self.model_for(h)

    def model_for(self, h: float) -> NewsvendorModel:
        return NewsvendorModel(
            h=h,
            b=self.b,
            theta0=self.theta0,
            alpha=self.alpha,
            beta=self.beta,
            action_interval=self.action_interval,
        )

    def to_dict(self) -> dict:
        return {
            "theta0": self.theta0,
            "b": self.b,
            "alpha": self.alpha,
            "beta": self.beta,
            "h_values": list(self.h_values),
            "n_schedule": list(self.n_schedule),
            "replications": self.replications,
            "quantile_level": self.quantile_level,
            "master_seed": self.master_seed,
            "rules": [rule.value for rule in self.rules],
            "action_interval": list(self.action_interval),
            "posterior_nodes": self.posterior_nodes,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        allowed = {
            "theta0",
            "b",
            "alpha",
            "beta",
            "h_values",
            "n_schedule",
            "replications",
            "quantile_level",
            "master_seed",
            "rules",
            "action_interval",
            "posterior_nodes",
        }
        unknown = set(raw) - allowed
        if unknown:
            raise ValueError(f"unknown config key: {sorted(unknown)[0]}")
        missing = {
            "theta0",
            "b",
            "alpha",
            "beta",
            "h_values",
            "n_schedule",
            "replications",
            "quantile_level",
            "master_seed",
            "rules",
        } - set(raw)
        if missing:
            raise ValueError(f"missing config key: {sorted(missing)[0]}")
        kwargs = dict(raw)
        kwargs["h_values"] = tuple(float(h) for h in raw["h_values"])
        kwargs["n_schedule"] = tuple(int(n) for n in raw["n_schedule"])
        kwargs["rules"] = tuple(_parse_rule(r) for r in raw["rules"])
        if "action_interval" in raw:
            interval = raw["action_interval"]
            if len(interval) != 2:
                raise ValueError("action_interval must hold exactly [a_lo, a_hi]")
            kwargs["action_interval"] = (float(interval[0]), float(interval[1]))
        return cls(**kwargs)


def _parse_rule(name) -> Rule:
    try:
        return Rule[str(name).upper()]
    except KeyError:
        raise ValueError(f"unknown rule: {name}") from None


def reference_config(**overrides) -> ExperimentConfig:
    """Built-in reference study: theta0=0.68, b=0.1, inverse-gamma(1, 4.1)
    prior, h in {0.001, ..., 0.009}, median gap along n in {10, 50, 250, 1250}.
    """
    base = dict(
        theta0=0.68,
        b=0.1,
        alpha=1.0,
        beta=4.1,
        h_values=tuple(round(0.001 * k, 3) for k in range(1, 10)),
        n_schedule=(10, 50, 250, 1250),
        replications=200,
        quantile_level=0.5,
        master_seed=424242,
        rules=(Rule.NVB, Rule.LCVB),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


@dataclass(frozen=True)
class GapRecord:
    rule: Rule
    h: float
    n: int
    gap_action: float
    gap_regret: float
    failed: bool = False


@dataclass(frozen=True)
class CurvePoint:
    n: int
    gap_action_q: float | None
    gap_regret_q: float | None
    replications: int
    failures: int


@dataclass(frozen=True)
class QuantileCurve:
    rule: Rule
    h: float
    quantile_level: float
    points: tuple[CurvePoint, ...] = field(default_factory=tuple)


def derive_path_seed(master_seed: int, path_index: int) -> int:
    """Avalanche-mixed 64-bit seed for one path (splitmix64 finalizer)."""
    x = (master_seed + (path_index + 1) * 0x9E3779B97F4A7C15) & _MASK64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _MASK64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _MASK64
    x ^= x >> 31
    return x


def simulate_path(config: ExperimentConfig, path_index: int) -> list[GapRecord]:
    """Run every configured rule on one demand path, returning per-cell gaps.

    One stream of max(n_schedule) demands is drawn; each n reuses its
    prefix and each holding cost sees the same prefix. The posterior grid
    and the plain variational fit depend only on the prefix and the prior,
    so they are shared across holding costs. Rule failures mark their cell
    and never abort the path.
    """
    if not 0 <= path_index < config.replications:
        raise ValueError(f"path_index {path_index} outside [0, {config.replications})")
    rng = np.random.default_rng(derive_path_seed(config.master_seed, path_index))
    stream = sample_demand(config.theta0, max(config.n_schedule), rng)
    settings = FitSettings()
    prior_model = config.model_for(config.h_values[0])
    needs_grid = Rule.LCVB in config.rules or Rule.BAYES in config.rules
    needs_fit = Rule.NVB in config.rules or Rule.LCVB in config.rules

    records: list[GapRecord] = []
    for n in config.n_schedule:
        data = stream.prefix(n)
        grid = None
        q_nvb = nvb_diag = None
        try:
            if needs_grid:
                grid = build_posterior(data, prior_model, config.posterior_nodes)
            if needs_fit:
                q_nvb, nvb_diag = fit_nvb(data, prior_model, settings)
        except NumericalError:
            for h in config.h_values:
                for rule in config.rules:
                    records.append(GapRecord(rule, h, n, math.nan, math.nan, failed=True))
            continue
        for h in config.h_values:
            model = config.model_for(h)
            for rule in config.rules:
                try:
                    if rule is Rule.NVB:
                        outcome = decide_with_variational(q_nvb, model, nvb_diag)
                    elif rule is Rule.LCVB:
                        outcome = lcvb_decide(
                            data, model, grid, settings, nvb_start=q_nvb
                        )
                    elif rule is Rule.BAYES:
                        outcome = bayes_decision(grid, model)
                    else:
                        raise ValueError(f"rule {rule} cannot be simulated")
                    gap_action, gap_regret = optimality_gap(outcome, model)
                    records.append(GapRecord(rule, h, n, gap_action, gap_regret))
                except NumericalError:
                    records.append(GapRecord(rule, h, n, math.nan, math.nan, failed=True))
    return records


def nearest_rank_quantile(values, level: float) -> float:
    """ceil(level * N)-th order statistic, no interpolation."""
    if not 0.0 < level < 1.0:
        raise ValueError("quantile level must lie in (0, 1)")
    ordered = sorted(float(v) for v in values)
    if not ordered:
        raise ValueError("cannot take a quantile of an empty sample")
    rank = min(max(math.ceil(level * len(ordered)), 1), len(ordered))
    return ordered[rank - 1]


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> list[QuantileCurve]:
    """Execute all paths and aggregate per-(rule, h, n) gap quantiles.

    Paths are independent work units; with jobs > 1 they run in a process
    pool. Aggregation is keyed deterministically, so the output does not
    depend on the execution order or the number of workers. Cells whose
    failure count exceeds half the replications get their quantiles marked
    missing with a warning.
    """
    indices = range(config.replications)
    if jobs > 1:
        chunksize = max(1, config.replications // (4 * jobs))
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_path = list(
                pool.map(partial(simulate_path, config), indices, chunksize=chunksize)
            )
    else:
        per_path = [simulate_path(config, i) for i in indices]

    gaps_action: dict[tuple, list[float]] = defaultdict(list)
    gaps_regret: dict[tuple, list[float]] = defaultdict(list)
    failure_counts: Counter = Counter()
    for records in per_path:
        for record in records:
            key = (record.rule, record.h, record.n)
            if record.failed:
                failure_counts[key] += 1
            else:
                gaps_action[key].append(record.gap_action)
                gaps_regret[key].append(record.gap_regret)

    curves = []
    for rule in config.rules:
        for h in config.h_values:
            points = []
            for n in config.n_schedule:
                key = (rule, h, n)
                gaps_a, gaps_r = gaps_action[key], gaps_regret[key]
                failures = failure_counts[key]
                if failures > 0.5 * config.replications:
                    logger.warning(
                        "cell (%s, h=%g, n=%d) has %d/%d failures; quantile marked missing",
                        rule.value,
                        h,
                        n,
                        failures,
                        config.replications,
                    )
                    qa = qr = None
                else:
                    qa = nearest_rank_quantile(gaps_a, config.quantile_level)
                    qr = nearest_rank_quantile(gaps_r, config.quantile_level)
                points.append(
                    CurvePoint(
                        n=n,
                        gap_action_q=qa,
                        gap_regret_q=qr,
                        replications=len(gaps_a),
                        failures=failures,
                    )
                )
            curves.append(
                QuantileCurve(
                    rule=rule, h=h, quantile_level=config.quantile_level, points=tuple(points)
                )
            )
    return curves


def estimate_rate(curve: QuantileCurve) -> float:
    """Least-squares slope of log(gap quantile) against log(n)."""
    pairs = [
        (point.n, point.gap_action_q)
        for point in curve.points
        if point.gap_action_q is not None and point.gap_action_q > 0
    ]
    if len(pairs) < 3:
        raise ValueError("rate estimation needs at least 3 points with positive quantiles")
    log_n = np.log([n for n, _ in pairs])
    log_q = np.log([q for _, q in pairs])
    slope, _ = np.polyfit(log_n, log_q, 1)
    return float(slope)


def _format_field(value) -> str:
    return "" if value is None else repr(float(value))


def write_results(
    curves,
    destination,
    config: ExperimentConfig,
    started_at: str | None = None,
    duration_seconds: float = 0.0,
) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` and ``<stem>.manifest.json``.

    The CSV is UTF-8 with LF line endings, '.' decimals and shortest
    round-trip float formatting, so identical curves always serialize to
    identical bytes. The manifest echoes the configuration, seed, start
    time, duration, and the tool version.
    """
    if not curves:
        raise ValueError("refusing to write an empty result set")
    stem = Path(destination)
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path = stem.with_name(stem.name + ".csv")
    manifest_path = stem.with_name(stem.name + ".manifest.json")

    lines = [CSV_HEADER]
    for curve in curves:
        for point in curve.points:
            lines.append(
                ",".join(
                    [
                        curve.rule.value,
                        repr(float(curve.h)),
                        str(point.n),
                        repr(float(curve.quantile_level)),
                        _format_field(point.gap_action_q),
                        _format_field(point.gap_regret_q),
                        str(point.replications),
                        str(point.failures),
                    ]
                )
            )
    try:
        csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
        manifest = {
            "config": config.to_dict(),
            "seed": config.master_seed,
            "started_at": started_at or datetime.now(timezone.utc).isoformat(),
            "duration_seconds": duration_seconds,
            "tool_version": __version__,
        }
        manifest_path.write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    except OSError as exc:
        raise OSError(f"failed to write results under {stem}: {exc}") from exc
    return csv_path, manifest_path


def read_results(csv_path) -> list[QuantileCurve]:
    """Parse a results CSV back into quantile curves (inverse of write)."""
    text = Path(csv_path).read_text(encoding="utf-8")
    lines = [line for line in text.split("\n") if line]
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"unexpected results header in {csv_path}")
    grouped: dict[tuple[Rule, float, float], list[CurvePoint]] = {}
    order: list[tuple[Rule, float, float]] = []
    for line in lines[1:]:
        fields = line.split(",")
        if len(fields) != 8:
            raise ValueError(f"malformed results row: {line!r}")
        rule = _parse_rule(fields[0])
        h = float(fields[1])
        level = float(fields[3])
        point = CurvePoint(
            n=int(fields[2]),
            gap_action_q=float(fields[4]) if fields[4] else None,
            gap_regret_q=float(fields[5]) if fields[5] else None,
            replications=int(fields[6]),
            failures=int(fields[7]),
        )
        key = (rule, h, level)
        if key not in grouped:
            grouped[key] = []
            order.append(key)
        grouped[key].append(point)
    return [
        QuantileCurve(rule=rule, h=h, quantile_level=level, points=tuple(grouped[(rule, h, level)]))
        for rule, h, level in order
    ]

"""Command-line interface: fit, decide, experiment, check.

Exit codes: 0 success, 1 check-property failure, 2 configuration error,
3 numerical failure. Seed precedence: --seed flag, then the SEED
environment variable, then the config file, then built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .decisions import lcvb_decide, nvb_decide, optimality_gap
from .experiment import (
    ExperimentConfig,
    estimate_rate,
    nearest_rank_quantile,
    reference_config,
    run_experiment,
    write_results,
)
from .model import (
    NewsvendorModel,
    Observations,
    fisher_information,
    sample_demand,
    true_optimal_action,
)
from .numerics import NumericalError
from .oracle import bayes_decision, build_posterior, mle, posterior_expected_risk
from .vb import (
    FitSettings,
    LogNormalVariational,
    calibrated_objective,
    elbo,
    elbo_gradient,
    fit_lcvb,
    fit_nvb,
    kl_decomposition_check,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

_FIT_DECIDE_KEYS = {
    "theta0",
    "h",
    "b",
    "alpha",
    "beta",
    "n",
    "seed",
    "values",
    "data",
    "a_lo",
    "a_hi",
}
_MODEL_DEFAULTS = {"h": 0.005, "b": 0.1, "alpha": 1.0, "beta": 4.1, "a_lo": 0.0, "a_hi": 50.0}


def _shared_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=Path, help="JSON config file (strict keys)")
    parser.add_argument("--seed", type=int, help="override every other seed source")
    parser.add_argument("--out", type=Path, help="output stem for generated files")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes (experiment)")
    parser.add_argument("--verbose", action="store_true", help="debug-level logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="newsvb",
        description="Variational Bayes decision rules for the data-driven newsvendor",
    )
    parser.add_argument("--version", action="version", version=f"newsvb {__version__}")
    commands = parser.add_subparsers(dest="command", metavar="command")

    fit = commands.add_parser("fit", help="fit a variational posterior to demand data")
    _shared_flags(fit)
    _data_model_flags(fit)
    fit.add_argument("--calibrate", type=float, metavar="A", help="loss-calibrated fit at action A")
    fit.add_argument(
        "--constant-risk",
        type=float,
        metavar="C",
        help="replace the risk with the constant C (testing hook)",
    )
    fit.set_defaults(handler=cmd_fit)

    decide = commands.add_parser("decide", help="compute a stocking decision")
    _shared_flags(decide)
    _data_model_flags(decide)
    decide.add_argument(
        "--rule", choices=["nvb", "lcvb", "bayes"], required=True, help="decision rule"
    )
    decide.set_defaults(handler=cmd_decide)

    experiment = commands.add_parser(
        "experiment", help="run the optimality-gap consistency experiment"
    )
    _shared_flags(experiment)
    experiment.add_argument(
        "--paper-defaults",
        action="store_true",
        help="use the built-in reference configuration (theta0=0.68, b=0.1, "
        "inverse-gamma(1, 4.1) prior, h=0.001..0.009, median gap)",
    )
    experiment.add_argument("--replications", type=int, help="number of sample paths")
    experiment.add_argument("--quantile", type=float, help="gap quantile level in (0, 1)")
    experiment.set_defaults(handler=cmd_experiment)

    check = commands.add_parser("check", help="run the numerical identity suite")
    _shared_flags(check)
    check.add_argument(
        "--inject-fault", action="store_true", help="force one failing property (testing hook)"
    )
    check.set_defaults(handler=cmd_check)
    return parser


def _data_model_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--values", help="inline comma-separated demand observations")
    parser.add_argument("--data", type=Path, help="file with one demand value per line")
    parser.add_argument("--n", type=int, help="synthetic sample size (needs --theta0)")
    parser.add_argument("--theta0", type=float, help="true exponential demand rate")
    parser.add_argument("--h", type=float, help="holding cost per unit (default 0.005)")
    parser.add_argument("--b", type=float, help="backorder cost per unit (default 0.1)")
    parser.add_argument("--alpha", type=float, help="prior shape (default 1.0)")
    parser.add_argument("--beta", type=float, help="prior rate (default 4.1)")
    parser.add_argument("--a-lo", type=float, dest="a_lo", help="decision interval lower end")
    parser.add_argument("--a-hi", type=float, dest="a_hi", help="decision interval upper end")


def _load_config_file(path: Path | None, allowed: set[str]) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ValueError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed JSON in {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    unknown = set(raw) - allowed
    if unknown:
        raise ValueError(f"unknown config key: {sorted(unknown)[0]}")
    return raw


def _env_seed() -> int | None:
    raw = os.environ.get("SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"SEED environment variable is not an integer: {raw!r}") from None


def _resolve_seed(args, file_cfg: dict, default: int) -> int:
    if args.seed is not None:
        return args.seed
    env = _env_seed()
    if env is not None:
        return env
    for key in ("seed", "master_seed"):
        if key in file_cfg:
            return int(file_cfg[key])
    return default


def _merged(args, file_cfg: dict, key: str, default=None):
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key in file_cfg:
        return file_cfg[key]
    return default


def _parse_inline_values(text: str) -> Observations:
    try:
        values = [float(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise ValueError(f"bad inline demand value: {exc}") from exc
    return Observations(values)


def _read_values_file(path: Path) -> Observations:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValueError(f"cannot read data file {path}: {exc}") from exc
    values = []
    for line in text.splitlines():
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        try:
            values.append(float(stripped))
        except ValueError:
            raise ValueError(f"bad demand value in {path}: {stripped!r}") from None
    return Observations(values)


def _resolve_model_and_data(args, file_cfg: dict) -> tuple[NewsvendorModel, Observations, int]:
    theta0 = _merged(args, file_cfg, "theta0")
    model = NewsvendorModel(
        h=float(_merged(args, file_cfg, "h", _MODEL_DEFAULTS["h"])),
        b=float(_merged(args, file_cfg, "b", _MODEL_DEFAULTS["b"])),
        theta0=None if theta0 is None else float(theta0),
        alpha=float(_merged(args, file_cfg, "alpha", _MODEL_DEFAULTS["alpha"])),
        beta=float(_merged(args, file_cfg, "beta", _MODEL_DEFAULTS["beta"])),
        action_interval=(
            float(_merged(args, file_cfg, "a_lo", _MODEL_DEFAULTS["a_lo"])),
            float(_merged(args, file_cfg, "a_hi", _MODEL_DEFAULTS["a_hi"])),
        ),
    )
    seed = _resolve_seed(args, file_cfg, default=0)
    inline = _merged(args, file_cfg, "values")
    data_path = _merged(args, file_cfg, "data")
    n = _merged(args, file_cfg, "n")
    if inline is not None:
        data = _parse_inline_values(inline) if isinstance(inline, str) else Observations(inline)
    elif data_path is not None:
        data = _read_values_file(Path(data_path))
    elif n is not None:
        if model.theta0 is None:
            raise ValueError("synthetic data needs --theta0")
        data = sample_demand(model.theta0, int(n), np.random.default_rng(seed))
    else:
        raise ValueError("provide demand data via --values, --data, or --n for synthetic draws")
    return model, data, seed


def cmd_fit(args) -> int:
    file_cfg = _load_config_file(args.config, _FIT_DECIDE_KEYS)
    model, data, _ = _resolve_model_and_data(args, file_cfg)
    settings = FitSettings()
    risk_fn = None
    if args.constant_risk is not None:
        constant = float(args.constant_risk)
        if constant <= 0:
            raise ValueError("--constant-risk must be positive")
        risk_fn = lambda a, theta: np.full_like(theta, constant)
    grid = build_posterior(data, model)
    if args.calibrate is not None:
        q, diag = fit_lcvb(args.calibrate, data, model, grid, settings, risk_fn=risk_fn)
        objective = calibrated_objective(args.calibrate, q, data, model, grid, risk_fn=risk_fn)
        print(f"rule                loss-calibrated fit at a={args.calibrate:.6g}")
    else:
        q, diag = fit_nvb(data, model, settings)
        objective = None
        print("rule                plain variational fit")
    kl = grid.log_evidence - elbo(q, data, model)
    theta_hat = mle(data)
    print(f"n                   {data.n}")
    print(f"mu                  {q.mu:.10g}")
    print(f"sigma               {q.sigma:.10g}")
    print(f"mean rate E_q[th]   {q.mean_theta():.10g}")
    # 1/sqrt(n I(theta_hat)): the scale the posterior should shrink at
    print(f"asymptotic rate sd  {1.0 / math.sqrt(data.n * fisher_information(theta_hat)):.10g}")
    print(f"elbo                {elbo(q, data, model):.10g}")
    print(f"log evidence        {grid.log_evidence:.10g}")
    print(f"KL(q || posterior)  {kl:.10g}")
    if objective is not None:
        print(f"objective value     {objective.value:.10g}")
        print(f"  kl_term           {objective.kl_term:.10g}")
        print(f"  log_risk_term     {objective.log_risk_term:.10g}")
    print(
        f"fit: iterations={diag.iterations} grad_norm={diag.final_gradient_norm:.3e} "
        f"converged={diag.converged} restarts={diag.restarts_used}"
    )
    return EXIT_OK


def cmd_decide(args) -> int:
    file_cfg = _load_config_file(args.config, _FIT_DECIDE_KEYS)
    model, data, _ = _resolve_model_and_data(args, file_cfg)
    settings = FitSettings()
    rule = args.rule
    if rule == "nvb":
        outcome = nvb_decide(data, model, settings)
    elif rule == "lcvb":
        grid = build_posterior(data, model)
        outcome = lcvb_decide(data, model, grid, settings)
    else:
        grid = build_posterior(data, model)
        outcome = bayes_decision(grid, model)
    print(f"rule                {outcome.rule.value}")
    print(f"n                   {data.n}")
    print(f"action              {outcome.action:.10g}")
    print(f"objective value     {outcome.objective_value:.10g}")
    print(f"probes              {outcome.probe_count}")
    if outcome.inner_fit is not None:
        print(
            f"fit: iterations={outcome.inner_fit.iterations} "
            f"grad_norm={outcome.inner_fit.final_gradient_norm:.3e} "
            f"converged={outcome.inner_fit.converged}"
        )
    if model.theta0 is not None:
        gap_action, gap_regret = optimality_gap(outcome, model)
        print(f"true optimum        {true_optimal_action(model):.10g}")
        print(f"gap_action          {gap_action:.10g}")
        print(f"gap_regret          {gap_regret:.10g}")
    return EXIT_OK


def _experiment_config(args) -> ExperimentConfig:
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
    file_cfg = _load_config_file(args.config, allowed)
    if args.paper_defaults:
        merged = reference_config().to_dict()
        merged.update(file_cfg)
    elif file_cfg:
        merged = dict(file_cfg)
    else:
        raise ValueError("provide --paper-defaults or a --config file for the experiment")
    if args.replications is not None:
        merged["replications"] = args.replications
    if args.quantile is not None:
        merged["quantile_level"] = args.quantile
    merged["master_seed"] = _resolve_seed(args, file_cfg, default=merged.get("master_seed", 0))
    return ExperimentConfig.from_dict(merged)


def cmd_experiment(args) -> int:
    config = _experiment_config(args)
    jobs = max(1, args.jobs)
    started_at = datetime.now(timezone.utc).isoformat()
    start = time.perf_counter()
    curves = run_experiment(config, jobs=jobs)
    duration = time.perf_counter() - start
    stem = args.out if args.out is not None else Path("experiment")
    csv_path, manifest_path = write_results(
        curves, stem, config, started_at=started_at, duration_seconds=duration
    )
    print(f"wrote {csv_path} and {manifest_path} in {duration:.1f}s")
    header = "rule    h       " + "".join(f"n={n:<10d}" for n in config.n_schedule)
    print(header)
    for curve in curves:
        cells = "".join(
            "missing   " if p.gap_action_q is None else f"{p.gap_action_q:<10.4f}"
            for p in curve.points
        )
        line = f"{curve.rule.value:<7} {curve.h:<7.3f} {cells}"
        try:
            line += f"  rate~{estimate_rate(curve):.2f}"
        except ValueError:
            pass
        print(line)
    failures = sum(p.failures for curve in curves for p in curve.points)
    if failures:
        print(f"warning: {failures} rule failures recorded across cells", file=sys.stderr)
    return EXIT_OK


def _check_dataset():
    model = NewsvendorModel(h=0.005, b=0.1, theta0=0.68, alpha=1.0, beta=4.1)
    data = sample_demand(model.theta0, 50, np.random.default_rng(20))
    grid = build_posterior(data, model)
    return model, data, grid


def _probe_members(rng, theta_hat: float, count: int):
    mus = math.log(theta_hat) + rng.uniform(-1.5, 1.5, size=count)
    sigmas = rng.uniform(0.05, 1.0, size=count)
    return [LogNormalVariational(float(m), float(s)) for m, s in zip(mus, sigmas)]


def _check_kl_decomposition() -> tuple[float, float]:
    model, data, grid = _check_dataset()
    rng = np.random.default_rng(7)
    members = _probe_members(rng, data.n / data.sum_s, 100)
    actions = rng.uniform(model.action_lo, model.action_hi, size=100)
    residual = max(
        kl_decomposition_check(float(a), q, data, model, grid)
        for a, q in zip(actions, members)
    )
    return residual, 1e-6


def _check_jensen_bound() -> tuple[float, float]:
    model, data, grid = _check_dataset()
    rng = np.random.default_rng(8)
    members = _probe_members(rng, data.n / data.sum_s, 100)
    actions = rng.uniform(model.action_lo, model.action_hi, size=100)
    worst = -math.inf
    for a, q in zip(actions, members):
        value = calibrated_objective(float(a), q, data, model, grid).value
        bound = math.log(posterior_expected_risk(float(a), grid, model))
        worst = max(worst, value - bound)
    return worst, 1e-8


def _check_elbo_gradient() -> tuple[float, float]:
    model, data, _ = _check_dataset()
    rng = np.random.default_rng(9)
    members = _probe_members(rng, data.n / data.sum_s, 50)
    step = 1e-6
    worst = 0.0
    for q in members:
        analytic = elbo_gradient(q, data, model)
        x = np.array([q.mu, math.log(q.sigma)])
        numeric = np.empty(2)
        for i in range(2):
            up, down = x.copy(), x.copy()
            up[i] += step
            down[i] -= step
            q_up = LogNormalVariational(up[0], math.exp(up[1]))
            q_down = LogNormalVariational(down[0], math.exp(down[1]))
            numeric[i] = (elbo(q_up, data, model) - elbo(q_down, data, model)) / (2 * step)
        scale = max(float(np.linalg.norm(analytic)), 1.0)
        worst = max(worst, float(np.linalg.norm(analytic - numeric)) / scale)
    return worst, 1e-5


def _check_quantile() -> tuple[float, float]:
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(200):
        size = int(rng.integers(1, 40))
        values = rng.normal(size=size)
        level = float(rng.uniform(0.01, 0.99))
        reference = sorted(values)[min(max(math.ceil(level * size), 1), size) - 1]
        worst = max(worst, abs(nearest_rank_quantile(values, level) - reference))
    return worst, 0.0


def cmd_check(args) -> int:
    checks = [
        ("kl-decomposition", _check_kl_decomposition),
        ("jensen-bound", _check_jensen_bound),
        ("elbo-gradient", _check_elbo_gradient),
        ("quantile-nearest-rank", _check_quantile),
    ]
    all_ok = True
    for name, runner in checks:
        residual, tolerance = runner()
        ok = residual <= tolerance
        all_ok = all_ok and ok
        print(f"{name:<24} residual={residual:.3e} tolerance={tolerance:.1e}  "
              f"{'PASS' if ok else 'FAIL'}")
    if args.inject_fault:
        print(f"{'injected-fault':<24} residual=inf tolerance=0.0e+00  FAIL")
        all_ok = False
    return EXIT_OK if all_ok else EXIT_CHECK_FAILED


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "command", None) is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

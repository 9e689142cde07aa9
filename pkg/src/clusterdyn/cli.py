"""Command-line interface.

Every command reads one JSON config (see ``config.py``) and writes CSV or
JSON lines to ``--out`` (stdout by default). Floats are printed with 17
significant digits so outputs are byte-stable across runs and thread counts.

Exit codes: 0 ok, 2 config, 3 positivity, 4 budget.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np
from pydantic import ValidationError

from .config import (
    RunConfig,
    SubClusterMechanism,
    build_coarsening,
    build_mechanism,
    build_model,
    build_regime,
    load_config,
)
from .errors import (
    BudgetExceeded,
    ClusterDynError,
    InsufficientBurnIn,
    PositivityViolated,
)
from .estimators import (
    EstimateReport,
    OptimalTarget,
    fit_empirical,
    ipw_estimate,
    one_step_estimate,
    online_estimate,
    plugin_estimate,
    z_quantile,
)
from .gformula import (
    IndicatorAtLeast,
    MeanOutcome,
    OutcomeCountDistribution,
    TreatedCountDistribution,
    compositional_gformula_expectation,
    is_distribution,
    large_cluster_value,
    reduced_compositional_expectation,
    value_curve,
)
from .regimes import optimal_regime
from .simulator import ClusterData, child_seed, exact_oracle, replicate, simulate_cluster

log = logging.getLogger("clusterdyn")

EXIT_OK, EXIT_CONFIG, EXIT_POSITIVITY, EXIT_BUDGET = 0, 2, 3, 4
METHODS = ("plugin", "ipw", "onestep", "online")


class ConfigError(ValueError):
    """Invalid flags or a config that cannot drive the requested command."""


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None:
        return ""
    return format(float(x), ".17g")


def _jsonable(x):
    """Plain JSON types; non-finite floats become strings."""
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    return x


@contextlib.contextmanager
def _output(path: Optional[str]):
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


# -- flag parsing -----------------------------------------------------------


def parse_functional(name: str):
    """mean | treated_count | outcome_count[:y] | at_least:y:x"""
    parts = name.split(":")
    head = parts[0].replace("-", "_")
    try:
        if head == "mean" and len(parts) == 1:
            return MeanOutcome()
        if head == "treated_count" and len(parts) == 1:
            return TreatedCountDistribution()
        if head == "outcome_count" and len(parts) <= 2:
            return OutcomeCountDistribution(int(parts[1]) if len(parts) == 2 else 1)
        if head == "at_least" and len(parts) == 3:
            return IndicatorAtLeast(int(parts[1]), int(parts[2]))
    except ValueError as exc:
        raise ConfigError(f"bad functional {name!r}: {exc}") from exc
    raise ConfigError(f"unknown functional {name!r}; use mean, treated_count, outcome_count[:y] or at_least:y:x")


def _functional_label(h) -> str:
    if isinstance(h, MeanOutcome):
        return "mean"
    if isinstance(h, IndicatorAtLeast):
        return f"at_least:{h.y}:{h.x}"
    raise TypeError(h)


def parse_grid(text: str, integer: bool) -> list:
    try:
        lo, hi, step = (float(t) for t in text.split(":"))
    except ValueError as exc:
        raise ConfigError(f"grid must be LO:HI:STEP, got {text!r}") from exc
    if step <= 0 or hi < lo:
        raise ConfigError(f"grid needs STEP > 0 and HI >= LO, got {text!r}")
    count = int(math.floor((hi - lo) / step + 1e-9)) + 1
    points = [lo + i * step for i in range(count)]
    if integer:
        if any(abs(p - round(p)) > 1e-9 for p in points):
            raise ConfigError(f"kappa grid must be integral, got {text!r}")
        return [int(round(p)) for p in points]
    return [round(p, 12) for p in points]


def _budget(cfg: RunConfig) -> Optional[int]:
    # the environment variable takes precedence over the config
    return None if os.environ.get("CLUSTERDYN_BUDGET") else cfg.budget


def _require(value, what: str):
    if value is None:
        raise ConfigError(f"config needs '{what}'")
    return value


# -- finite-cluster evaluation ----------------------------------------------


def _kappa_list(args, cfg: RunConfig, n: int) -> list:
    if args.kappa is not None:
        return [args.kappa]
    if args.kappa_grid is not None:
        return parse_grid(args.kappa_grid, integer=True)
    block = _require(cfg.regime, "regime")
    if block.kappa is not None:
        return [block.kappa]
    if block.kappa_star is not None:
        return [min(n, math.floor(n * block.kappa_star + 1e-9))]
    return list(range(n + 1))


def _finite_rows(kappa: int, h, value) -> list:
    if is_distribution(h):
        return [[fmt(kappa), fmt(x), fmt(v)] for x, v in enumerate(np.asarray(value))]
    return [[fmt(kappa), _functional_label(h), fmt(value)]]


def _finite(args, evaluate) -> int:
    cfg = load_config(args.config)
    model = build_model(cfg)
    coarsening = build_coarsening(cfg)
    n = _require(cfg.n, "n")
    h = parse_functional(args.functional)
    block = _require(cfg.regime, "regime")
    rows = []
    for kappa in _kappa_list(args, cfg, n):
        spec = build_regime(block, model, coarsening, kappa=kappa)
        rows += _finite_rows(kappa, h, evaluate(cfg, model, coarsening, spec, n, h))
    with _output(args.out) as fh:
        w = _writer(fh)
        w.writerow(["kappa", "x_or_metric", "value"])
        w.writerows(rows)
    return EXIT_OK


def _gformula(args):
    def evaluate(cfg, model, coarsening, spec, n, h):
        if coarsening is not None and not isinstance(h, TreatedCountDistribution):
            rep = reduced_compositional_expectation(model, coarsening, spec, n, h, budget=_budget(cfg))
            log.info("reduced evaluation: kappa=%d terms=%d", rep.kappa, rep.terms)
        else:
            rep = compositional_gformula_expectation(model, spec, n, h, budget=_budget(cfg), threads=args.threads)
            log.info("compositional evaluation: kappa=%d terms=%d", rep.kappa, rep.terms)
        return rep.value

    return evaluate


def cmd_evaluate_finite(args) -> int:
    return _finite(args, _gformula(args))


def cmd_oracle(args) -> int:
    return _finite(args, lambda cfg, model, coarsening, spec, n, h: exact_oracle(model, spec, n, h))


# -- large-cluster evaluation -----------------------------------------------


def cmd_evaluate_large(args) -> int:
    cfg = load_config(args.config)
    model = build_model(cfg)
    coarsening = build_coarsening(cfg)
    block = _require(cfg.regime, "regime")
    if args.kappa_star is not None:
        grid = [args.kappa_star]
    elif args.kappa_grid is not None:
        grid = parse_grid(args.kappa_grid, integer=False)
    elif block.kappa_star is not None:
        grid = [block.kappa_star]
    else:
        grid = parse_grid("0:1:0.05", integer=False)
    if any(not 0.0 <= g <= 1.0 for g in grid):
        raise ConfigError("kappa_star grid must lie in [0, 1]")
    spec = build_regime(block, model, coarsening, kappa_star=grid[0])
    with _output(args.out) as fh:
        w = _writer(fh)
        w.writerow(["kappa_star", "omega_or_eta", "value"])
        for rep in value_curve(model, spec, grid):
            w.writerow([fmt(rep.kappa_star), fmt(rep.meta["threshold"]), fmt(rep.value)])
    return EXIT_OK


# -- simulation -------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    model = build_model(cfg)
    mechanism = build_mechanism(cfg, model, build_coarsening(cfg))
    n = _require(cfg.n, "n")
    reps = args.reps if args.reps is not None else cfg.reps
    seed = args.seed if args.seed is not None else cfg.seed
    blocks = isinstance(cfg.mechanism, SubClusterMechanism)
    results = replicate(model, mechanism, n, reps, seed, threads=args.threads)
    with _output(args.out) as fh:
        w = _writer(fh)
        w.writerow(["rep", "i", "l", "a", "y"] + (["w_block"] if blocks else []))
        for r, d in enumerate(results):
            for i in range(d.n):
                row = [r, i, int(d.L[i]), int(d.A[i]), int(d.Y[i])]
                if blocks:
                    row.append(int(d.W[i]))
                w.writerow(row)
    return EXIT_OK


def read_dataset(path: str) -> dict:
    """Dataset CSV to {rep: ClusterData}, in file order within each rep."""
    rows: dict = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"l", "a", "y"} - set(reader.fieldnames or ())
        if missing:
            raise ConfigError(f"dataset {path} lacks columns {sorted(missing)}")
        for rec in reader:
            rep = int(rec.get("rep") or 0)
            rows.setdefault(rep, []).append((int(rec["l"]), int(rec["a"]), int(rec["y"])))
    out = {}
    for rep, recs in sorted(rows.items()):
        arr = np.array(recs, dtype=np.int64).reshape(-1, 3)
        out[rep] = ClusterData(arr[:, 0], arr[:, 1], arr[:, 2])
    return out


# -- estimation -------------------------------------------------------------


def bootstrap_seed(seed: int, rep: int) -> np.random.SeedSequence:
    """Resampling stream for rep ``rep``; disjoint from the simulation streams of child(seed, rep)."""
    return np.random.SeedSequence(entropy=seed, spawn_key=(rep, 3))


def _estimation_target(cfg: RunConfig, model, coarsening, kappa_star: Optional[float]):
    """(target, n_star) where target is a RegimeSpec or an OptimalTarget."""
    block = _require(cfg.regime, "regime")
    if cfg.n_star is not None and kappa_star is None:
        if block.type in ("optimal", "optimal_gated"):
            raise ConfigError("finite-cluster estimation needs a fixed regime, not a learned optimal one")
        return build_regime(block, model, coarsening), cfg.n_star
    ks = kappa_star if kappa_star is not None else block.kappa_star
    if ks is None:
        raise ConfigError("set regime.kappa_star, --kappa-star or n_star for an estimation target")
    if block.type in ("optimal", "optimal_gated"):
        return OptimalTarget(ks, gated=block.type == "optimal_gated", coarsening=coarsening), None
    return build_regime(block, model, coarsening, kappa_star=ks), None


def _true_value(cfg: RunConfig, model, coarsening, target, n_star) -> float:
    if isinstance(target, OptimalTarget):
        spec = optimal_regime(model, coarsening, kappa_star=target.kappa_star, gated=target.gated)
        return large_cluster_value(model, spec)
    if n_star is not None:
        return float(compositional_gformula_expectation(model, target, n_star, budget=_budget(cfg)).value)
    return large_cluster_value(model, target)


def estimate_one(method, data, cfg, target, n_star, alpha, burn_in, bootstrap, seed) -> EstimateReport:
    levels = len(cfg.model.q_l)
    outcomes = len(cfg.model.q_y[0][0])
    scores = cfg.model.scores
    if method == "online":
        return online_estimate(data, levels, outcomes, target, alpha=alpha, burn_in=burn_in, scores=scores)
    emp = fit_empirical(data, levels, outcomes, scores)
    if method == "onestep":
        return one_step_estimate(data, emp, target, alpha=alpha)

    def point(d, e):
        if method == "plugin":
            return plugin_estimate(e, target, n_star)
        return ipw_estimate(d, e, target, n_star)

    report = point(data, emp)
    if bootstrap > 0:
        rng = np.random.default_rng(seed)
        draws, failed = [], 0
        for _ in range(bootstrap):
            idx = rng.integers(0, data.n, size=data.n)
            d = ClusterData(data.L[idx], data.A[idx], data.Y[idx])
            try:
                draws.append(point(d, fit_empirical(d, levels, outcomes, scores)).point)
            except PositivityViolated:
                failed += 1
        if len(draws) >= 2:
            se = float(np.std(draws, ddof=1))
            half = z_quantile(alpha) * se
            report.se, report.ci = se, (report.point - half, report.point + half)
        report.diagnostics["bootstrap"] = bootstrap
        report.diagnostics["bootstrap_failed"] = failed
    return report


def _methods(text: Optional[str], default: str) -> list:
    names = [m.strip() for m in (text or default).split(",") if m.strip()]
    bad = [m for m in names if m not in METHODS]
    if bad or not names:
        raise ConfigError(f"unknown method(s) {bad}; choose from {', '.join(METHODS)}")
    return names


def _settings(args, cfg: RunConfig):
    alpha = args.alpha if args.alpha is not None else cfg.alpha
    burn_in = args.burn_in if args.burn_in is not None else (cfg.burn_in if cfg.burn_in is not None else 500)
    seed = args.seed if args.seed is not None else cfg.seed
    if not 0.0 < alpha < 1.0:
        raise ConfigError("alpha must lie in (0, 1)")
    return alpha, burn_in, seed


def cmd_estimate(args) -> int:
    cfg = load_config(args.config)
    model = build_model(cfg)
    coarsening = build_coarsening(cfg)
    path = args.data or cfg.data
    if path is None:
        raise ConfigError("estimate needs --data or a 'data' entry in the config")
    datasets = read_dataset(path)
    target, n_star = _estimation_target(cfg, model, coarsening, args.kappa_star)
    alpha, burn_in, seed = _settings(args, cfg)
    methods = _methods(args.method, "plugin")
    with _output(args.out) as fh:
        for rep, data in datasets.items():
            for method in methods:
                report = estimate_one(
                    method, data, cfg, target, n_star, alpha, burn_in, args.bootstrap, bootstrap_seed(seed, rep)
                )
                row = {"rep": rep, **report.as_dict()}
                fh.write(json.dumps(_jsonable(row), sort_keys=False, allow_nan=False) + "\n")
    return EXIT_OK


# -- replication ------------------------------------------------------------


def cmd_replicate(args) -> int:
    cfg = load_config(args.config)
    model = build_model(cfg)
    coarsening = build_coarsening(cfg)
    mechanism = build_mechanism(cfg, model, coarsening)
    n = _require(cfg.n, "n")
    reps = args.reps if args.reps is not None else cfg.reps
    alpha, burn_in, seed = _settings(args, cfg)
    target, n_star = _estimation_target(cfg, model, coarsening, args.kappa_star)
    methods = _methods(args.method, "plugin,ipw" if n_star is not None else ",".join(METHODS))
    if n_star is not None and {"onestep", "online"} & set(methods):
        raise ConfigError("onestep and online estimate large-cluster targets only")
    truth = _true_value(cfg, model, coarsening, target, n_star)

    results: dict = {m: [] for m in methods}
    failures: dict = {m: 0 for m in methods}

    def one(r):
        data = simulate_cluster(model, mechanism, n, child_seed(seed, r))
        out = {}
        for m in methods:
            try:
                out[m] = estimate_one(m, data, cfg, target, n_star, alpha, burn_in, args.bootstrap, bootstrap_seed(seed, r))
            except (PositivityViolated, InsufficientBurnIn):
                out[m] = None
        return out

    if args.threads <= 1:
        per_rep = [one(r) for r in range(reps)]
    else:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            per_rep = list(pool.map(one, range(reps)))
    for out in per_rep:
        for m in methods:
            if out[m] is None:
                failures[m] += 1
            else:
                results[m].append(out[m])

    with _output(args.out) as fh:
        w = _writer(fh)
        w.writerow(["method", "truth", "mean_point", "emp_se", "mean_se", "coverage"])
        if reps == 0:
            return EXIT_OK
        for m in methods:
            reports = results[m]
            if failures[m]:
                log.warning("%s: %d of %d replications failed a positivity check", m, failures[m], reps)
            points = np.array([r.point for r in reports])
            ses = [r.se for r in reports if r.se is not None]
            cis = [r.ci for r in reports if r.ci is not None]
            w.writerow([
                m,
                fmt(truth),
                fmt(points.mean()) if points.size else "",
                fmt(points.std(ddof=1)) if points.size >= 2 else "",
                fmt(np.mean(ses)) if ses else "",
                fmt(np.mean([lo <= truth <= hi for lo, hi in cis])) if cis else "",
            ])
    return EXIT_OK


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clusterdyn", description="Cluster-regime evaluation and estimation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", default=None, help="output path (default stdout)")
        p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on this)")
        p.set_defaults(func=fn)
        return p

    for name, fn, help_ in (
        ("evaluate-finite", cmd_evaluate_finite, "finite-cluster g-formula table"),
        ("oracle", cmd_oracle, "brute-force oracle on small instances"),
    ):
        p = common(name, fn, help_)
        p.add_argument("--functional", default="mean", help="mean | treated_count | outcome_count[:y] | at_least:y:x")
        g = p.add_mutually_exclusive_group()
        g.add_argument("--kappa", type=int, help="single treated count")
        g.add_argument("--kappa-grid", help="integer grid LO:HI:STEP")

    p = common("evaluate-large", cmd_evaluate_large, "large-cluster value curve")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--kappa-star", type=float, help="single treated proportion")
    g.add_argument("--kappa-grid", help="proportion grid LO:HI:STEP")

    p = common("simulate", cmd_simulate, "simulate clusters to a dataset CSV")
    p.add_argument("--reps", type=int, help="number of clusters")
    p.add_argument("--seed", type=int, help="root seed")

    for name, fn, help_ in (
        ("estimate", cmd_estimate, "estimate from a dataset CSV (JSON lines)"),
        ("replicate", cmd_replicate, "simulate and estimate repeatedly; summary CSV"),
    ):
        p = common(name, fn, help_)
        p.add_argument("--method", help="comma-separated subset of plugin,ipw,onestep,online")
        p.add_argument("--alpha", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--burn-in", type=int)
        p.add_argument("--bootstrap", type=int, default=0, help="bootstrap resamples for plugin/ipw SEs")
        p.add_argument("--kappa-star", type=float, help="large-cluster target proportion")
        if name == "estimate":
            p.add_argument("--data", help="dataset CSV (overrides config 'data')")
        else:
            p.add_argument("--reps", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr
    )
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be positive")
    try:
        return args.func(args)
    except BudgetExceeded as exc:
        log.error("%s", exc)
        return EXIT_BUDGET
    except (PositivityViolated, InsufficientBurnIn) as exc:
        log.error("%s", exc)
        return EXIT_POSITIVITY
    except ValidationError as exc:
        log.error("invalid config: %s", exc)
        return EXIT_CONFIG
    except (ClusterDynError, ValueError, OSError, TypeError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

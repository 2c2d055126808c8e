"""``bridgestop`` command line.

Every subcommand writes its outputs plus ``manifest.json`` into ``--out``.
The manifest records the resolved configuration, seed, package version and
SHA-256 digests of inputs and outputs. It carries no timestamps and omits the
worker count, so reruns are byte-identical. Exit codes: 0 ok, 1 numerical or
runtime failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._parallel import WORKERS_ENV, default_workers
from .boundary import (SolverConfig, SolverError, call_boundary_from_put, log_grid,
                       read_boundary_csv, solve_boundary, value_function, write_boundary_csv,
                       write_boundary_json)
from .bridge import BridgeSpec, TimeGrid, read_path_csv
from .inference import (DegenerateEstimateError, confidence_curves, mle_sigma, write_band_csv,
                        write_coverage_csv)
from .market_data import (DEFAULT_RHOS, BundleError, aggregate_profit, evaluate_bundle,
                          load_bundle, load_rates, normalize, pinning_deviance, relative_profit,
                          weighted_oi)
from .simulation import (ConfigError, CoverageConfig, ExperimentConfig, StoppingRule,
                         monte_carlo_value, run_payoff_study)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad input detected after argument parsing (exit code 2)."""


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """Collects outputs and writes the manifest."""

    def __init__(self, command: str, out: Path, config: dict):
        self.command = command
        self.out = out
        self.config = config
        self.seed = None
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []

    def input(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise UsageError(f"input not found: {path}")
        self.inputs.append(path)
        return path

    def output(self, name: str) -> Path:
        path = self.out / name
        self.outputs.append(path)
        return path

    def manifest(self, error: str | None, code: int) -> Path:
        def digests(paths, key):
            return {key(p): _sha256(p) for p in paths if p.is_file()}

        doc = {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "version": __version__,
            "inputs": digests(self.inputs, str),
            # keyed by name so the manifest does not depend on where --out points
            "outputs": digests(self.outputs, lambda p: p.name),
            "error": error,
            "exit_code": code,
        }
        dest = self.out / "manifest.json"
        dest.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
        return dest


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _grid(kind: str, nodes: int, horizon: float) -> TimeGrid:
    return log_grid(nodes, horizon) if kind == "log" else TimeGrid.uniform(nodes, horizon)


def _spec(args) -> BridgeSpec:
    try:
        return BridgeSpec(args.strike, args.horizon, args.sigma, args.discount)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_solve(args, run: Run) -> None:
    spec = _spec(args)
    put = solve_boundary(spec, SolverConfig(_grid(args.grid, args.nodes, spec.horizon), args.delta))
    b = call_boundary_from_put(put, spec.strike) if args.side == "call" else put
    write_boundary_csv(b, run.output("boundary.csv"))
    write_boundary_json(b, run.output("boundary.json"))
    print(f"solved {args.side} boundary on {b.grid.N} intervals; b(0) = {b.values[0]:.6f}")


def cmd_price(args, run: Run) -> None:
    spec = _spec(args)
    if not 0 <= args.t < spec.horizon:
        raise UsageError(f"--t must lie in [0, {spec.horizon})")
    b = solve_boundary(spec, SolverConfig(_grid(args.grid, args.nodes, spec.horizon), args.delta))
    doc = {"t": args.t, "x": args.x, "value": value_function(args.t, args.x, b, spec)}
    if args.mc_paths:
        run.seed = args.seed
        grid = np.concatenate([[args.t], b.grid.nodes[b.grid.nodes > args.t]])
        mean, se = monte_carlo_value(args.t, args.x, StoppingRule(b, spec.strike), spec, grid,
                                     args.mc_paths, args.seed, workers=args.workers)
        doc.update(mc_mean=mean, mc_se=se, mc_paths=args.mc_paths)
    run.output("price.json").write_text(json.dumps(doc, indent=2) + "\n")
    print(f"V({args.t}, {args.x}) = {doc['value']:.6f}")


def cmd_infer(args, run: Run) -> None:
    path = read_path_csv(run.input(args.path))
    strike = float(path.values[-1]) if args.strike is None else args.strike
    horizon = float(path.times[-1]) if args.horizon is None else args.horizon
    run.config.update(strike=strike, horizon=horizon)
    if not 0 < args.use_fraction <= 1:
        raise UsageError("--use-fraction must be in (0, 1]")
    n = int(math.floor(args.use_fraction * (len(path) - 1) + 1e-9))
    # increments ending at the horizon carry no information
    n = min(n, int(np.searchsorted(path.times, horizon, side="left")) - 1)
    if n < 1:
        raise UsageError("history too short: need at least one increment before the horizon")
    est = mle_sigma(path, strike, horizon, n)
    fisher = "nan" if est.fisher is None else f"{est.fisher:.6g}"
    print(f"sigma_hat={est.sigma_hat:.6g} n={est.n} fisher={fisher}")
    doc = {"sigma_hat": est.sigma_hat, "n": est.n, "fisher": est.fisher}
    run.output("estimate.json").write_text(json.dumps(doc, indent=2) + "\n")
    if est.degenerate:
        raise DegenerateEstimateError("sigma_hat = 0: the path lies on the deterministic bridge "
                                      "line, so no boundary can be built")
    spec = BridgeSpec(strike, horizon, est.sigma_hat, args.discount)
    band = confidence_curves(est, spec, SolverConfig(log_grid(args.nodes, horizon), args.delta),
                             args.alpha, args.fd_step)
    write_band_csv(band, run.output("band.csv"))


def cmd_study(args, run: Run) -> None:
    cls = CoverageConfig if args.kind == "coverage" else ExperimentConfig
    doc = {}
    if args.config is not None:
        try:
            doc = json.loads(run.input(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"not valid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError("<root>", "expected a JSON object")
    if args.replications is not None:
        doc["M"] = args.replications
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = cls.from_dict(doc)
    run.config = {"kind": args.kind, **cfg.to_dict()}
    run.seed = cfg.seed
    if args.kind == "coverage":
        res = cfg.run(workers=args.workers)
        write_coverage_csv(res, run.output("coverage.csv"))
        inside = res.within_reference(3 * math.sqrt(res.alpha * (1 - res.alpha) / cfg.M))[1:-1]
        print(f"{res.successes} replications ({res.failures} failed); "
              f"{inside.mean():.1%} of interior nodes within alpha +- 3 binomial sd")
    else:
        table = run_payoff_study(cfg, workers=args.workers)
        table.to_csv(run.output("payoffs.csv"))
        print(f"{len(table.cells())} cells x {len(table.rules)} rules; "
              f"{sum(table.failures.values())} paths excluded")


def _strategy(spec: str, run: Run):
    name, sep, file = spec.partition("=")
    if not sep or not name or not file:
        raise UsageError(f"--strategy expects NAME=FILE, got {spec!r}")
    path = run.input(file)
    try:
        return name, StoppingRule(read_boundary_csv(path), 1.0, "put", name)
    except (ValueError, KeyError) as exc:
        raise BundleError(path, str(exc)) from None


def cmd_data(args, run: Run) -> None:
    bundle = Path(args.bundle)
    if not bundle.is_dir():
        raise UsageError(f"bundle directory not found: {bundle}")
    records = load_bundle(bundle)
    for p in sorted(bundle.glob("*.csv")):
        run.inputs.append(p)
    rates = load_rates(run.input(args.rates)) if args.rates else None
    strategies = {}
    if not args.no_bridge:
        strategies["bridge"] = "bridge"
    for s in args.strategy or []:
        name, rule = _strategy(s, run)
        if name in strategies:
            raise UsageError(f"duplicate strategy name {name!r}")
        strategies[name] = rule
    if not strategies:
        raise UsageError("no strategies to evaluate")
    names = list(strategies)
    compare = args.compare or (names[:2] if len(names) >= 2 else None)
    if compare and not set(compare) <= set(names):
        raise UsageError(f"--compare names must be among {names}")

    results, deviances, failures = evaluate_bundle(
        records, strategies, args.rhos, rates, args.days_per_year, args.nodes, args.delta)
    if not results:
        raise SolverError("every (option, rho, strategy) evaluation failed")
    aggs = [aggregate_profit(results, deviances, p) for p in args.thresholds]

    with open(run.output("profit.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["p", "strategy", "mean_profit"])
        for agg in aggs:
            for name in names:
                w.writerow([repr(agg.threshold), name, repr(agg.mean_profit.get(name, float("nan")))])
    if compare:
        with open(run.output("relative_profit.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["p", "relative_profit"])
            for agg in aggs:
                w.writerow([repr(agg.threshold), repr(relative_profit(agg, *compare))])
    with open(run.output("cohorts.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["p", "cohort", "empty"])
        for agg in aggs:
            w.writerow([repr(agg.threshold), agg.cohort, int(agg.empty)])
    with open(run.output("options.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "pinning_deviance", "weighted_oi"])
        for rec in records:
            woi = weighted_oi(rec.oi) if rec.oi.size else float("nan")
            w.writerow([rec.id, repr(pinning_deviance(normalize(rec))), repr(woi)])
    with open(run.output("failures.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "rho", "strategy", "message"])
        w.writerows(failures)
    run.config["compare"] = compare
    print(f"{len(records)} options, {len(results)} evaluations, {len(failures)} failures")


def _add_spec_args(p, sigma_required=True):
    p.add_argument("--strike", type=float, required=True)
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--sigma", type=float, required=sigma_required)
    p.add_argument("--lambda", dest="discount", type=float, default=0.0)


def _add_solver_args(p):
    p.add_argument("--nodes", type=int, default=200)
    p.add_argument("--delta", type=float, default=1e-3)
    p.add_argument("--grid", choices=("log", "uniform"), default="log")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bridgestop", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--workers", type=int, default=None,
                        help=f"worker processes (default: ${WORKERS_ENV} or 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", parents=[common], help="compute an exercise boundary")
    _add_spec_args(p)
    _add_solver_args(p)
    p.add_argument("--side", choices=("put", "call"), default="put")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("price", parents=[common], help="value at (t, x) under the solved boundary")
    _add_spec_args(p)
    _add_solver_args(p)
    p.add_argument("--t", type=float, default=0.0)
    p.add_argument("--x", type=float, required=True)
    p.add_argument("--mc-paths", type=int, default=0, help="also run a Monte Carlo check")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_price)

    p = sub.add_parser("infer", parents=[common], help="estimate sigma and a boundary band")
    p.add_argument("--path", required=True, help="CSV with columns t,x")
    p.add_argument("--strike", type=float, default=None, help="default: final path value")
    p.add_argument("--horizon", type=float, default=None, help="default: final path time")
    p.add_argument("--lambda", dest="discount", type=float, default=0.0)
    p.add_argument("--use-fraction", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--fd-step", type=float, default=1e-2)
    p.add_argument("--nodes", type=int, default=200)
    p.add_argument("--delta", type=float, default=1e-3)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("study", parents=[common], help="coverage or payoff simulation study")
    p.add_argument("--kind", choices=("coverage", "payoff"), required=True)
    p.add_argument("--config", default=None, help="JSON config; omitted fields take defaults")
    p.add_argument("--replications", type=int, default=None, help="override M")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("data", parents=[common], help="profit aggregates on an option bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--strategy", action="append", metavar="NAME=CSV",
                   help="external boundary (t,b on normalised coordinates); repeatable")
    p.add_argument("--no-bridge", action="store_true", help="skip the estimated bridge strategy")
    p.add_argument("--compare", nargs=2, metavar=("A", "B"),
                   help="relative profit (A - B) / B; default: first two strategies")
    p.add_argument("--thresholds", type=_floats,
                   default=[round(0.005 * k, 3) for k in range(1, 21)])
    p.add_argument("--rhos", type=_floats, default=list(DEFAULT_RHOS))
    p.add_argument("--rates", default=None, help="CSV with columns date,rate")
    p.add_argument("--days-per-year", type=float, default=365.0)
    p.add_argument("--nodes", type=int, default=200)
    p.add_argument("--delta", type=float, default=1e-3)
    p.set_defaults(func=cmd_data)
    return parser


def _resolved(args) -> dict:
    skip = {"func", "workers", "out"}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k not in skip}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.workers = default_workers() if args.workers is None else args.workers
    except ValueError as exc:
        parser.error(str(exc))
    if args.workers < 1:
        parser.error("--workers must be >= 1")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create output directory: {exc}", file=sys.stderr)
        return EXIT_USAGE
    run = Run(args.command, args.out, _resolved(args))
    error, code = None, EXIT_OK
    try:
        args.func(args, run)
    except (UsageError, ConfigError, BundleError) as exc:
        error, code = str(exc), EXIT_USAGE
    except (SolverError, DegenerateEstimateError, ValueError, ArithmeticError) as exc:
        error, code = f"{type(exc).__name__}: {exc}", EXIT_RUNTIME
    if error:
        print(f"error: {error}", file=sys.stderr)
    run.manifest(error, code)
    return code


if __name__ == "__main__":
    sys.exit(main())

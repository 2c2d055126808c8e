"""Stopping rules on sampled paths and the payoff study for estimated boundaries.

Hitting is checked at path nodes only (discrete monitoring), which biases
payoffs slightly relative to continuous monitoring.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ._parallel import pmap
from .boundary import (Boundary, SolverConfig, SolverError, closed_form_boundary_lambda0, log_grid,
                       solve_boundary)
from .bridge import (TIME_RTOL, BridgeSpec, PricePath, TimeGrid, _bridge_from_normals,
                     marginal_quantile, sample_paths_through)
from .inference import (ConfidenceBand, DegenerateEstimateError, VolEstimate, confidence_curves,
                        coverage_experiment, fisher_information, mle_sigma)

__all__ = [
    "StoppingRule",
    "ExperimentConfig",
    "CoverageConfig",
    "ConfigError",
    "PayoffTable",
    "RULES",
    "first_hit",
    "first_hits",
    "discounted_payoff",
    "discounted_payoffs",
    "monte_carlo_value",
    "run_payoff_study",
]

RULES = ("true", "estimated", "upper", "lower")


@dataclass
class StoppingRule:
    """Exercise the first time the price is at or beyond ``boundary``."""

    boundary: Boundary
    strike: float
    side: str = "put"
    name: str = "rule"

    def __post_init__(self):
        if self.side not in ("put", "call"):
            raise ValueError(f"side must be 'put' or 'call', got {self.side!r}")

    @classmethod
    def from_band(cls, band: ConfidenceBand, which: str, strike: float) -> "StoppingRule":
        return cls(band.boundary(which), strike, "put", which)

    @classmethod
    def constant(cls, level: float, strike: float, start: float, horizon: float,
                 side: str = "put") -> "StoppingRule":
        grid = TimeGrid(np.linspace(start, horizon, 3), start=start)
        return cls(Boundary(grid, np.full(3, float(level)), side), strike, side, f"const{level:g}")

    def levels(self, times) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        nodes = self.boundary.grid.nodes
        tol = TIME_RTOL * max(abs(float(nodes[-1])), 1.0)
        if times.size and (times[0] < nodes[0] - tol or times[-1] > nodes[-1] + tol):
            raise ValueError(
                f"rule '{self.name}' covers [{nodes[0]}, {nodes[-1]}], "
                f"path spans [{times[0]}, {times[-1]}]")
        return np.asarray(self.boundary(np.clip(times, nodes[0], nodes[-1])), dtype=float)

    def gain(self, x):
        x = np.asarray(x, dtype=float)
        return np.maximum(self.strike - x, 0.0) if self.side == "put" else np.maximum(x - self.strike, 0.0)


def first_hits(values: np.ndarray, times: np.ndarray, rule: StoppingRule, start: int = 0) -> np.ndarray:
    """Stopping index for each row of ``values``; the last index if the rule is never hit."""
    values = np.atleast_2d(values)
    last = values.shape[1] - 1
    if not 0 <= start <= last:
        raise IndexError(f"start index {start} outside [0, {last}]")
    lv = rule.levels(times[start:])
    seg = values[:, start:]
    hit = seg <= lv if rule.side == "put" else seg >= lv
    hit[:, -1] = True
    return start + hit.argmax(axis=1)


def first_hit(path: PricePath, rule: StoppingRule, start: int = 0) -> int:
    return int(first_hits(path.values, path.times, rule, start)[0])


def discounted_payoffs(values: np.ndarray, times: np.ndarray, rule: StoppingRule,
                       discount: float, start: int = 0) -> np.ndarray:
    values = np.atleast_2d(values)
    idx = first_hits(values, times, rule, start)
    x = values[np.arange(values.shape[0]), idx]
    return np.exp(-discount * (times[idx] - times[start])) * rule.gain(x)


def discounted_payoff(path: PricePath, rule: StoppingRule, discount: float, start: int = 0) -> float:
    """``exp(-lambda (t_tau - t_start)) * gain(X_tau)`` for the rule's first hit."""
    return float(discounted_payoffs(path.values, path.times, rule, discount, start)[0])


def _mc_chunk(args):
    seed, k, size, nodes, x0, spec, rule = args
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,)))
    z = rng.standard_normal((size, nodes.size - 1))
    X = _bridge_from_normals(nodes, np.full(size, float(x0)), spec.strike, spec.sigma, z)
    pay = discounted_payoffs(X, nodes, rule, spec.discount)
    return math.fsum(pay), math.fsum(pay * pay), size


def monte_carlo_value(t0: float, x0: float, rule: StoppingRule, spec: BridgeSpec, grid,
                      n_paths: int = 100_000, seed: int = 0, chunk: int = 10_000,
                      workers: int = 1) -> tuple[float, float]:
    """Monte Carlo mean and standard error of the discounted payoff of ``rule``.

    Paths start at ``(t0, x0)`` and are monitored at the nodes of ``grid``.
    """
    nodes = grid.nodes if isinstance(grid, TimeGrid) else np.asarray(grid, dtype=float)
    if abs(nodes[0] - t0) > TIME_RTOL * spec.horizon:
        raise ValueError("grid must start at t0")
    sizes = [min(chunk, n_paths - k) for k in range(0, n_paths, chunk)]
    tasks = [(seed, k, s, nodes, x0, spec, rule) for k, s in enumerate(sizes)]
    parts = pmap(_mc_chunk, tasks, workers)
    total = math.fsum(p[0] for p in parts)
    sq = math.fsum(p[1] for p in parts)
    mean = total / n_paths
    var = (sq - n_paths * mean * mean) / (n_paths - 1) if n_paths > 1 else float("nan")
    return mean, math.sqrt(max(var, 0.0) / n_paths)


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"invalid config field '{field_name}': {message}")


class _JsonConfig:
    """Shared loading for the study configs; unknown keys are schema errors."""

    @classmethod
    def from_dict(cls, doc: dict):
        if not isinstance(doc, dict):
            raise ConfigError("<root>", "expected a JSON object")
        known = {f.name for f in fields(cls)}
        for key in doc:
            if key not in known:
                raise ConfigError(key, "unknown field")
        return cls(**doc)

    @classmethod
    def from_json(cls, path):
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"not valid JSON ({exc})") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return asdict(self)


def _need(ok, name, msg):
    if not ok:
        raise ConfigError(name, msg)


def _check_numbers(cfg, floats, ints):
    for name in floats:
        v = getattr(cfg, name)
        _need(isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v),
              name, f"expected a finite number, got {v!r}")
    for name in ints:
        v = getattr(cfg, name)
        _need(isinstance(v, int) and not isinstance(v, bool), name, f"expected an integer, got {v!r}")


@dataclass
class ExperimentConfig(_JsonConfig):
    """Payoff study settings.

    Evaluation times are ``t_i = i T / N`` for ``i`` in ``nodes``; the history
    used for estimation is the path up to ``t_i`` (a fraction ``i / N``).
    Paths are sampled every ``T / (r N)``.
    """

    strike: float = 10.0
    horizon: float = 1.0
    sigma: float = 1.0
    discount: float = 0.0
    x0: float = 10.0
    N: int = 200
    r: int = 1
    M: int = 1000
    quantiles: list = field(default_factory=lambda: [0.2, 0.4, 0.6, 0.8])
    nodes: list = field(default_factory=lambda: list(range(1, 200)))
    alpha: float = 0.05
    fd_step: float = 1e-2
    delta: float = 1e-3
    solver_nodes: int = 200
    true_boundary: str = "auto"
    true_nodes: int = 1000
    inject_sigma: float | None = None
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def spec(self) -> BridgeSpec:
        return BridgeSpec(self.strike, self.horizon, self.sigma, self.discount)

    def validate(self):
        need = _need
        _check_numbers(self, ("strike", "horizon", "sigma", "discount", "x0", "alpha", "fd_step",
                              "delta"), ("N", "r", "M", "solver_nodes", "true_nodes", "seed"))
        need(self.strike > 0, "strike", "must be > 0")
        need(self.horizon > 0, "horizon", "must be > 0")
        need(self.sigma > 0, "sigma", "must be > 0")
        need(self.discount >= 0, "discount", "must be >= 0")
        need(self.N >= 2, "N", "must be >= 2")
        need(self.r >= 1, "r", "must be an integer >= 1")
        need(self.M >= 1, "M", "must be >= 1")
        need(self.solver_nodes >= 2, "solver_nodes", "must be >= 2")
        need(self.true_nodes >= 2, "true_nodes", "must be >= 2")
        need(self.seed >= 0, "seed", "must be >= 0")
        need(0 < self.alpha <= 1, "alpha", "must be in (0, 1]")
        need(self.fd_step > 0, "fd_step", "must be > 0")
        need(self.delta > 0, "delta", "must be > 0")
        need(isinstance(self.quantiles, list) and len(self.quantiles) > 0
             and all(isinstance(q, (int, float)) and 0 < q < 1 for q in self.quantiles),
             "quantiles", "must be a non-empty list of levels in (0, 1)")
        need(isinstance(self.nodes, list) and len(self.nodes) > 0
             and all(isinstance(i, int) and 1 <= i < self.N for i in self.nodes),
             "nodes", f"must be a non-empty list of integers in [1, N-1] = [1, {self.N - 1}]")
        need(self.true_boundary in ("auto", "closed_form", "solve"), "true_boundary",
             "must be one of 'auto', 'closed_form', 'solve'")
        need(not (self.true_boundary == "closed_form" and self.discount != 0), "true_boundary",
             "the closed form requires discount = 0")
        need(self.inject_sigma is None or (isinstance(self.inject_sigma, (int, float))
                                           and self.inject_sigma > 0),
             "inject_sigma", "must be null or a positive number")

@dataclass
class CoverageConfig(_JsonConfig):
    """Coverage study settings: ``M`` bridges on ``N`` equal steps, sigma estimated from ``n``."""

    strike: float = 10.0
    horizon: float = 1.0
    sigma: float = 1.0
    discount: float = 0.0
    x0: float | None = None
    N: int = 200
    n: int = 66
    M: int = 1000
    alpha: float = 0.05
    fd_step: float = 1e-2
    delta: float = 1e-3
    solver_nodes: int = 200
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def spec(self) -> BridgeSpec:
        return BridgeSpec(self.strike, self.horizon, self.sigma, self.discount)

    def validate(self):
        _check_numbers(self, ("strike", "horizon", "sigma", "discount", "alpha", "fd_step", "delta"),
                       ("N", "n", "M", "solver_nodes", "seed"))
        _need(self.x0 is None or (isinstance(self.x0, (int, float)) and math.isfinite(self.x0)),
              "x0", "must be null or a finite number")
        _need(self.strike > 0, "strike", "must be > 0")
        _need(self.horizon > 0, "horizon", "must be > 0")
        _need(self.sigma > 0, "sigma", "must be > 0")
        _need(self.discount >= 0, "discount", "must be >= 0")
        _need(self.N >= 2, "N", "must be >= 2")
        _need(1 <= self.n < self.N, "n", f"must satisfy 1 <= n < N = {self.N}")
        _need(self.M >= 1, "M", "must be >= 1")
        _need(self.solver_nodes >= 2, "solver_nodes", "must be >= 2")
        _need(self.seed >= 0, "seed", "must be >= 0")
        _need(0 < self.alpha <= 1, "alpha", "must be in (0, 1]")
        _need(self.fd_step > 0, "fd_step", "must be > 0")
        _need(self.delta > 0, "delta", "must be > 0")

    def run(self, workers: int = 1):
        config = SolverConfig(log_grid(self.solver_nodes, self.horizon), self.delta)
        return coverage_experiment(self.sigma, self.n, self.N, self.M, self.alpha, self.spec,
                                   seed=self.seed, x0=self.x0, config=config,
                                   epsilon=self.fd_step, workers=workers)


@dataclass
class PayoffTable:
    """Per-(t_i, q, rule) payoff statistics plus the raw per-path payoffs.

    Rows of ``payoffs[(i, q)]`` are paths; columns follow ``RULES``. The same
    paths are evaluated under every rule.
    """

    times: dict
    payoffs: dict
    failures: dict
    rules: tuple = RULES

    def cells(self):
        return sorted(self.payoffs)

    def stats(self, i: int, q: float, rule: str) -> dict:
        p = self.payoffs[(i, q)][:, self.rules.index(rule)]
        m = p.size
        mean = math.fsum(p) / m if m else float("nan")
        var = float(np.var(p, ddof=1)) if m > 1 else float("nan")
        return {"mean": mean, "variance": var,
                "se": math.sqrt(var / m) if m > 1 else float("nan"), "count": m}

    def paired(self, i: int, q: float, rule_a: str, rule_b: str) -> tuple[float, float]:
        """Mean and standard error of the per-path difference ``a - b``."""
        p = self.payoffs[(i, q)]
        d = p[:, self.rules.index(rule_a)] - p[:, self.rules.index(rule_b)]
        if d.size < 2:
            return float(d.mean()) if d.size else float("nan"), float("nan")
        return float(d.mean()), float(np.std(d, ddof=1) / math.sqrt(d.size))

    def rows(self):
        for i, q in self.cells():
            for rule in self.rules:
                s = self.stats(i, q, rule)
                yield (self.times[i], q, rule, s["mean"], s["variance"], s["se"], s["count"],
                       self.failures[(i, q)])

    def to_csv(self, dest) -> Path:
        dest = Path(dest)
        with open(dest, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "q", "rule", "mean", "variance", "se", "count", "failures"])
            for t, q, rule, mean, var, se, count, fail in self.rows():
                w.writerow([repr(float(t)), repr(float(q)), rule, repr(mean), repr(var),
                            repr(se), count, fail])
        return dest


def _payoff_task(args):
    cfg, i, q, paths = args
    spec = cfg.spec
    T, S = spec.horizon, spec.strike
    fine = TimeGrid.uniform(cfg.r * cfg.N, T).nodes
    k = cfg.r * i
    t_i = fine[k]
    x_mid = marginal_quantile(t_i, q, 0.0, cfg.x0, spec)
    seeds = [np.random.SeedSequence(cfg.seed, spawn_key=(i, int(round(q * 1e6)), j)) for j in paths]
    X = sample_paths_through(0.0, cfg.x0, t_i, x_mid, fine, spec, seeds)
    solver = SolverConfig(log_grid(cfg.solver_nodes, T), cfg.delta)
    true_rule = StoppingRule(_true_boundary(cfg, solver), S, "put", "true")
    future = fine[k:]
    out = []
    failed = 0
    for row in X:
        path = PricePath(fine[: k + 1], row[: k + 1])
        try:
            if cfg.inject_sigma is None:
                est = mle_sigma(path, S, T)
            else:
                est = VolEstimate(cfg.inject_sigma, k, fisher_information(cfg.inject_sigma))
            band = confidence_curves(est, spec, solver, cfg.alpha, cfg.fd_step)
        except (SolverError, DegenerateEstimateError, ValueError):
            failed += 1
            continue
        rules = [true_rule] + [StoppingRule.from_band(band, w, S) for w in ("center", "upper", "lower")]
        seg = row[k:]
        out.append([discounted_payoffs(seg, future, rule, spec.discount)[0] for rule in rules])
    return np.array(out, dtype=float).reshape(-1, len(RULES)), failed


def _true_boundary(cfg: ExperimentConfig, solver: SolverConfig) -> Boundary:
    spec = cfg.spec
    mode = cfg.true_boundary
    if mode == "auto":
        mode = "closed_form" if spec.discount == 0 else "solve"
    if mode == "closed_form":
        return closed_form_boundary_lambda0(spec, solver.grid)
    if cfg.true_nodes == cfg.solver_nodes:
        return solve_boundary(spec, solver)
    return solve_boundary(spec, SolverConfig(log_grid(cfg.true_nodes, spec.horizon), solver.delta))


def run_payoff_study(config: ExperimentConfig, workers: int = 1, chunk: int = 50) -> PayoffTable:
    """Payoffs of the true, estimated, upper and lower rules from quantile-conditioned starts.

    For every evaluation node ``i`` and level ``q``, ``M`` paths are forced
    through ``(t_i, q-quantile of X_(t_i))``; each path's history up to ``t_i``
    gives sigma-hat and the band, and its future is used to evaluate the rules.
    Paths whose estimate or solve fails are excluded and counted.
    """
    cells = [(i, q) for i in config.nodes for q in config.quantiles]
    tasks = []
    for i, q in cells:
        for start in range(0, config.M, chunk):
            tasks.append((config, i, q, range(start, min(start + chunk, config.M))))
    results = pmap(_payoff_task, tasks, workers)
    payoffs: dict = {}
    failures: dict = {}
    for (cfg, i, q, _), (pay, failed) in zip(tasks, results):
        payoffs.setdefault((i, q), []).append(pay)
        failures[(i, q)] = failures.get((i, q), 0) + failed
    payoffs = {key: np.concatenate(v) for key, v in payoffs.items()}
    times = {i: config.horizon * i / config.N for i in config.nodes}
    return PayoffTable(times, payoffs, failures)

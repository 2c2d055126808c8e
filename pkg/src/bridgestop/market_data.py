"""Real-data side: strike normalisation, pinning diagnostics and rho-aggregated profits.

Bundle layout (one directory)::

    meta.csv        id,strike,expiry
    path_<id>.csv   t,x        raw prices; t in days
    oi_<id>.csv     day,oi     daily open interest
    rates.csv       date,rate  annualised rate; date in the same day units (optional)

Times are in days. ``normalize`` maps each option's life ``[t_first, expiry]``
onto ``[0, 1]`` and divides prices by the strike, so the normalised discount
rate is ``rate * lifespan_days / days_per_year``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .boundary import SolverConfig, SolverError, log_grid, solve_boundary
from .bridge import BridgeSpec, PricePath
from .inference import mle_sigma
from .simulation import StoppingRule, discounted_payoff

__all__ = [
    "OptionRecord",
    "ProfitAggregate",
    "BundleError",
    "DEFAULT_RHOS",
    "normalize",
    "pinning_deviance",
    "weighted_oi",
    "oi_weights",
    "split_path",
    "split_index",
    "aggregate_profit",
    "relative_profit",
    "load_bundle",
    "load_rates",
    "rate_at",
    "bridge_strategy_profit",
    "rule_profit",
]

DEFAULT_RHOS = tuple(round(0.1 * k, 1) for k in range(1, 10))


class BundleError(ValueError):
    """A malformed file in a data bundle; ``path`` names it."""

    def __init__(self, path, message: str):
        self.path = Path(path)
        super().__init__(f"{self.path.name}: {message}")


@dataclass
class OptionRecord:
    id: str
    strike: float
    path: PricePath
    oi: np.ndarray = field(default_factory=lambda: np.zeros(0))
    expiry: float | None = None

    def __post_init__(self):
        if not self.strike > 0:
            raise ValueError(f"option {self.id}: strike must be > 0, got {self.strike}")
        if len(self.path) == 0:
            raise ValueError(f"option {self.id}: empty path")
        self.oi = np.asarray(self.oi, dtype=float)

    @property
    def lifespan(self) -> float:
        end = self.path.times[-1] if self.expiry is None else self.expiry
        return float(end - self.path.times[0])


def normalize(record: OptionRecord) -> PricePath:
    """Prices over strike, times mapped so the option lives on ``[0, 1]``."""
    if not record.strike > 0:
        raise ValueError("strike must be > 0")
    t = record.path.times
    span = record.lifespan
    if not span > 0:
        raise ValueError(f"option {record.id}: expiry must be after the first observation")
    times = (t - t[0]) / span
    return PricePath(times, record.path.values / record.strike)


def pinning_deviance(path: PricePath) -> float:
    """``|X_final - 1|`` for a strike-normalised path."""
    if len(path) == 0:
        raise ValueError("empty path")
    return abs(float(path.values[-1]) - 1.0)


def oi_weights(K: int) -> np.ndarray:
    """Weights ``exp(-(1 - k/K))`` normalised to sum to one, ``k = 0..K``."""
    if K < 0:
        raise ValueError("K must be >= 0")
    if K == 0:
        return np.ones(1)
    w = np.exp(-(1.0 - np.arange(K + 1) / K))
    return w / w.sum()


def weighted_oi(oi: Sequence[float]) -> float:
    """Exponentially time-weighted open interest; later days weigh more."""
    oi = np.asarray(oi, dtype=float)
    if oi.size == 0:
        raise ValueError("empty open-interest series")
    if np.any(oi < 0):
        raise ValueError("open interest must be >= 0")
    return float(np.dot(oi_weights(oi.size - 1), oi))


def split_index(n_last: int, rho: float) -> int:
    if not 0 < rho < 1:
        raise ValueError(f"rho must be in (0, 1), got {rho}")
    # guard against 0.3 * 10 = 2.9999999999999996
    return int(math.floor(rho * n_last + 1e-9))


def split_path(path: PricePath, rho: float) -> tuple[PricePath, PricePath]:
    """History ``0..floor(rho N)`` and future ``floor(rho N)..N``; the split node is in both."""
    k = split_index(len(path) - 1, rho)
    return path.slice(0, k + 1), path.slice(k)


@dataclass
class ProfitAggregate:
    threshold: float
    mean_profit: dict
    cohort: int
    n_rhos: int

    @property
    def empty(self) -> bool:
        return self.cohort == 0


def aggregate_profit(results: Iterable[tuple], deviances: dict, p: float) -> ProfitAggregate:
    """Mean profit per strategy over options with deviance ``< p`` and over all rho.

    ``results`` holds ``(option_id, rho, strategy, profit)`` tuples. The
    average is ``sum / (|P| |J(p)|)`` with ``P`` the set of rho values seen.
    """
    results = list(results)
    if not results:
        raise ValueError("no profit results to aggregate")
    rhos = sorted({r[1] for r in results})
    strategies = sorted({r[2] for r in results})
    cohort = sorted(j for j, d in deviances.items() if d < p)
    members = set(cohort)
    if not cohort:
        return ProfitAggregate(p, {s: float("nan") for s in strategies}, 0, len(rhos))
    sums: dict = {s: [] for s in strategies}
    for j, _, s, profit in results:
        if j in members:
            sums[s].append(profit)
    denom = len(rhos) * len(cohort)
    return ProfitAggregate(p, {s: math.fsum(v) / denom for s, v in sums.items()},
                           len(cohort), len(rhos))


def relative_profit(agg: ProfitAggregate, strategy: str, baseline: str) -> float:
    """``(A(p) - B(p)) / B(p)``; nan for an empty cohort or a zero baseline."""
    a, b = agg.mean_profit[strategy], agg.mean_profit[baseline]
    if agg.empty or b == 0 or math.isnan(b):
        return float("nan")
    return (a - b) / b


def _read_csv(path, required: set) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not required <= set(reader.fieldnames):
                raise BundleError(path, f"expected columns {sorted(required)}, got {reader.fieldnames}")
            return list(reader)
    except FileNotFoundError:
        raise BundleError(path, "missing file") from None


def _floats(path, rows, col) -> np.ndarray:
    try:
        return np.array([float(r[col]) for r in rows])
    except (TypeError, ValueError) as exc:
        raise BundleError(path, f"non-numeric value in column '{col}' ({exc})") from None


def load_bundle(directory) -> list[OptionRecord]:
    directory = Path(directory)
    meta_path = directory / "meta.csv"
    records = []
    for row in _read_csv(meta_path, {"id", "strike", "expiry"}):
        oid = row["id"].strip()
        try:
            strike = float(row["strike"])
            expiry = float(row["expiry"]) if row["expiry"].strip() else None
        except ValueError as exc:
            raise BundleError(meta_path, f"option {oid}: {exc}") from None
        p_path = directory / f"path_{oid}.csv"
        rows = _read_csv(p_path, {"t", "x"})
        if not rows:
            raise BundleError(p_path, "no price rows")
        t, x = _floats(p_path, rows, "t"), _floats(p_path, rows, "x")
        try:
            path = PricePath(t, x)
        except ValueError as exc:
            raise BundleError(p_path, str(exc)) from None
        oi_path = directory / f"oi_{oid}.csv"
        oi = np.zeros(0)
        if oi_path.exists():
            oi = _floats(oi_path, _read_csv(oi_path, {"day", "oi"}), "oi")
        try:
            records.append(OptionRecord(oid, strike, path, oi, expiry))
        except ValueError as exc:
            raise BundleError(meta_path, str(exc)) from None
    if not records:
        raise BundleError(meta_path, "no options listed")
    return records


def load_rates(path) -> tuple[np.ndarray, np.ndarray]:
    rows = _read_csv(path, {"date", "rate"})
    if not rows:
        raise BundleError(path, "no rate rows")
    dates, rates = _floats(path, rows, "date"), _floats(path, rows, "rate")
    order = np.argsort(dates, kind="stable")
    return dates[order], rates[order]


def rate_at(rates: tuple[np.ndarray, np.ndarray] | None, when: float) -> float:
    """Latest rate published at or before ``when`` (the earliest if none precede it)."""
    if rates is None:
        return 0.0
    dates, values = rates
    k = int(np.searchsorted(dates, when, side="right")) - 1
    return float(values[max(k, 0)])


def rule_profit(norm: PricePath, rule: StoppingRule, rho: float, discount: float) -> float:
    k = split_index(len(norm) - 1, rho)
    return discounted_payoff(norm, rule, discount, start=k)


def bridge_strategy_profit(norm: PricePath, rho: float, discount: float,
                           solver_nodes: int = 200, delta: float = 1e-3) -> float:
    """Estimate sigma on the history, solve the unit-strike boundary, trade the future."""
    k = split_index(len(norm) - 1, rho)
    if k < 1:
        raise ValueError(f"history too short for estimation at rho={rho}")
    est = mle_sigma(norm, 1.0, 1.0, n=k)
    if est.degenerate:
        raise ValueError("degenerate volatility estimate")
    spec = BridgeSpec(1.0, 1.0, est.sigma_hat, discount)
    b = solve_boundary(spec, SolverConfig(log_grid(solver_nodes, 1.0), delta))
    return discounted_payoff(norm, StoppingRule(b, 1.0, "put", "bridge"), discount, start=k)


def evaluate_bundle(records: Sequence[OptionRecord], strategies: dict, rhos=DEFAULT_RHOS,
                    rates=None, days_per_year: float = 365.0, solver_nodes: int = 200,
                    delta: float = 1e-3):
    """Profits for every (option, rho, strategy).

    ``strategies`` maps names to a :class:`StoppingRule` on normalised
    coordinates, or to ``"bridge"`` for the estimated bridge boundary.
    Returns ``(results, deviances, failures)``; failures are
    ``(option_id, rho, strategy, message)`` tuples excluded from results.
    """
    results, failures, deviances = [], [], {}
    for rec in records:
        norm = normalize(rec)
        deviances[rec.id] = pinning_deviance(norm)
        years = rec.lifespan / days_per_year
        for rho in rhos:
            k = split_index(len(norm) - 1, rho)
            lam = rate_at(rates, float(rec.path.times[k])) * years
            for name, strat in strategies.items():
                try:
                    if strat == "bridge":
                        profit = bridge_strategy_profit(norm, rho, lam, solver_nodes, delta)
                    else:
                        profit = rule_profit(norm, strat, rho, lam)
                except (SolverError, ValueError) as exc:
                    failures.append((rec.id, rho, name, str(exc)))
                    continue
                results.append((rec.id, rho, name, profit))
    return results, deviances, failures

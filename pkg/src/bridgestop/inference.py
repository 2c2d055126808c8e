"""Volatility MLE for a discretely observed bridge and delta-method boundary bands."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import ndtri

from ._parallel import pmap
from .boundary import (Boundary, SolverConfig, SolverError, closed_form_boundary_lambda0,
                       log_grid, solve_boundary)
from .bridge import BridgeSpec, PricePath, TimeGrid, sample_path

__all__ = [
    "VolEstimate",
    "ConfidenceBand",
    "CoverageResult",
    "DegenerateEstimateError",
    "mle_sigma",
    "fisher_information",
    "standardized_residuals",
    "confidence_curves",
    "coverage_experiment",
    "true_boundary",
    "write_band_csv",
    "write_coverage_csv",
]


class DegenerateEstimateError(ValueError):
    """Raised when a zero volatility estimate is used where sigma > 0 is required."""


@dataclass(frozen=True)
class VolEstimate:
    sigma_hat: float
    n: int
    fisher: float | None

    @property
    def degenerate(self) -> bool:
        return self.sigma_hat == 0.0


def fisher_information(sigma: float) -> float:
    """Per-observation Fisher information of the bridge volatility, ``2 / sigma^2``."""
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    return 2.0 / sigma**2


def _deviations(path: PricePath, strike: float, horizon: float, n: int | None):
    n = len(path) - 1 if n is None else int(n)
    if n < 1:
        raise ValueError("need at least one increment to estimate sigma")
    if n > len(path) - 1:
        raise ValueError(f"path has only {len(path) - 1} increments, asked for {n}")
    t = path.times[: n + 1]
    x = path.values[: n + 1]
    if np.any(t >= horizon):
        raise ValueError("observation times must be < T (the conditional variance vanishes at T)")
    t0, t1 = t[:-1], t[1:]
    mean = x[:-1] * (horizon - t1) / (horizon - t0) + strike * (t1 - t0) / (horizon - t0)
    sd = np.sqrt((t1 - t0) * (horizon - t1) / (horizon - t0))
    # roundoff floor for "the path sits on the deterministic line"
    tol = 64 * np.finfo(float).eps * max(float(np.max(np.abs(x))), abs(strike))
    return x[1:] - mean, sd, tol


def standardized_residuals(path: PricePath, strike: float, horizon: float,
                           n: int | None = None) -> np.ndarray:
    """Increments of the first ``n`` steps standardised by the unit-volatility bridge law."""
    dev, sd, _ = _deviations(path, strike, horizon, n)
    return dev / sd


def mle_sigma(path: PricePath, strike: float, horizon: float, n: int | None = None) -> VolEstimate:
    """Maximum-likelihood volatility from the first ``n`` increments of ``path``.

    A path lying on the deterministic bridge line (up to roundoff) gives
    ``sigma_hat = 0``; that estimate is returned (``degenerate``) rather than
    raised, and has no Fisher information.
    """
    dev, sd, tol = _deviations(path, strike, horizon, n)
    if np.all(np.abs(dev) <= tol):
        return VolEstimate(0.0, dev.size, None)
    res = dev / sd
    sigma_hat = float(np.sqrt(np.mean(res * res)))
    return VolEstimate(sigma_hat, res.size, fisher_information(sigma_hat))


@dataclass
class ConfidenceBand:
    """Pointwise band ``lower <= center <= upper`` around an estimated boundary."""

    grid: TimeGrid
    lower: np.ndarray
    center: np.ndarray
    upper: np.ndarray
    alpha: float
    epsilon: float
    slope: np.ndarray | None = None

    def boundary(self, which: str = "center", spec: BridgeSpec | None = None) -> Boundary:
        values = {"center": self.center, "upper": self.upper, "lower": self.lower}[which]
        return Boundary(self.grid, values, "put", spec)

    @property
    def half_width(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)


def _critical_value(alpha: float) -> float:
    # alpha = 1 is accepted as the zero-width limit
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    return float(ndtri(1.0 - alpha / 2.0))


def confidence_curves(est: VolEstimate, spec: BridgeSpec, config: SolverConfig,
                      alpha: float = 0.05, epsilon: float = 1e-2,
                      solver: Callable[[BridgeSpec, SolverConfig], Boundary] = solve_boundary,
                      ) -> ConfidenceBand:
    """Delta-method band for the boundary at the estimated volatility.

    ``spec`` supplies strike, horizon and discount; its volatility is replaced by
    ``est.sigma_hat``. The sensitivity to sigma is a forward difference with step
    ``epsilon`` (one extra solve).
    """
    if est.degenerate:
        raise DegenerateEstimateError("sigma_hat = 0: the data lie on the deterministic bridge line")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    z = _critical_value(alpha)
    base = solver(spec.replace(sigma=est.sigma_hat), config)
    bumped = solver(spec.replace(sigma=est.sigma_hat + epsilon), config)
    slope = (bumped.values - base.values) / epsilon
    half = z / math.sqrt(est.n * fisher_information(est.sigma_hat)) * np.abs(slope)
    center = base.values
    return ConfidenceBand(base.grid, center - half, center.copy(), center + half,
                          alpha, epsilon, slope)


def true_boundary(spec: BridgeSpec, config: SolverConfig, nodes: int = 1000) -> np.ndarray:
    """Reference boundary at ``config.grid``'s nodes.

    The closed form when there is no discounting; otherwise a log-grid solve
    with ``nodes`` intervals, spline-interpolated onto the grid.
    """
    if spec.discount == 0:
        return closed_form_boundary_lambda0(spec, config.grid).values
    fine = solve_boundary(spec, SolverConfig(log_grid(nodes, spec.horizon), config.delta,
                                             config.max_iter))
    out = np.asarray(fine(config.grid.nodes), dtype=float)
    out[-1] = spec.strike
    return out


@dataclass
class CoverageResult:
    times: np.ndarray
    proportion: np.ndarray
    outside: np.ndarray
    successes: int
    failures: int
    alpha: float
    reference: tuple[float, float]

    def within_reference(self, width: float | None = None) -> np.ndarray:
        """Nodes whose proportion lies in ``alpha +- width`` (default: the 95% binomial band)."""
        if width is None:
            lo, hi = self.reference
        else:
            lo, hi = self.alpha - width, self.alpha + width
        return (self.proportion >= lo) & (self.proportion <= hi)


def _coverage_task(args):
    (seed, reps, spec, x0, path_nodes, n, config, alpha, epsilon, truth) = args
    outside = np.zeros(config.grid.nodes.size, dtype=np.int64)
    ok = failed = 0
    for r in reps:
        rng_seed = np.random.SeedSequence(seed, spawn_key=(r,))
        path = sample_path(0.0, x0, path_nodes, spec, seed=rng_seed)
        try:
            est = mle_sigma(path, spec.strike, spec.horizon, n)
            band = confidence_curves(est, spec, config, alpha, epsilon)
        except (SolverError, DegenerateEstimateError, ValueError):
            failed += 1
            continue
        ok += 1
        outside += (truth < band.lower) | (truth > band.upper)
    return outside, ok, failed


def coverage_experiment(sigma: float, n: int, N: int, M: int, alpha: float, spec: BridgeSpec,
                        seed: int = 0, x0: float | None = None, config: SolverConfig | None = None,
                        epsilon: float = 1e-2, workers: int = 1, chunk: int = 25) -> CoverageResult:
    """Proportion of replications whose band misses the true boundary, per solver node.

    Each replication samples a bridge from ``(0, x0)`` on ``N`` equal steps,
    estimates sigma from the first ``n`` increments and builds the band on the
    solver grid. Work is split into fixed ``chunk``-sized blocks, so results do
    not depend on ``workers``.
    """
    if not 1 <= n < N:
        raise ValueError(f"need 1 <= n < N, got n={n}, N={N}")
    if M < 1:
        raise ValueError("M must be >= 1")
    spec = spec.replace(sigma=sigma)
    x0 = spec.strike if x0 is None else float(x0)
    config = config or SolverConfig(log_grid(200, spec.horizon))
    truth = true_boundary(spec, config)
    path_nodes = TimeGrid.uniform(N, spec.horizon).nodes
    blocks = [range(k, min(k + chunk, M)) for k in range(0, M, chunk)]
    tasks = [(seed, blk, spec, x0, path_nodes, n, config, alpha, epsilon, truth) for blk in blocks]
    outside = np.zeros(config.grid.nodes.size, dtype=np.int64)
    ok = failed = 0
    for out, s, f in pmap(_coverage_task, tasks, workers):
        outside += out
        ok += s
        failed += f
    with np.errstate(invalid="ignore", divide="ignore"):
        prop = outside / ok if ok else np.full(outside.shape, np.nan)
    width = float(ndtri(0.975)) * math.sqrt(alpha * (1 - alpha) / M)
    return CoverageResult(config.grid.nodes.copy(), prop, outside, ok, failed, alpha,
                          (alpha - width, alpha + width))


def write_band_csv(band: ConfidenceBand, dest) -> Path:
    dest = Path(dest)
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "lower", "center", "upper"])
        for row in zip(band.grid.nodes, band.lower, band.center, band.upper):
            w.writerow([repr(float(v)) for v in row])
    return dest


def write_coverage_csv(result: CoverageResult, dest) -> Path:
    dest = Path(dest)
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "proportion", "failures"])
        for t, p in zip(result.times, result.proportion):
            w.writerow([repr(float(t)), repr(float(p)), result.failures])
    return dest

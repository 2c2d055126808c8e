"""Brownian bridge pinned at the strike: moments, quantiles and exact sampling.

Normal CDF and quantile come from ``scipy.special.ndtr`` / ``ndtri`` (Cephes
implementations, accurate to ~1e-16 absolute on the range used here).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ndtri

__all__ = [
    "BridgeSpec",
    "TimeGrid",
    "PricePath",
    "bridge_mean",
    "bridge_stddev",
    "sample_path",
    "sample_paths",
    "sample_path_through",
    "marginal_quantile",
    "node_index",
    "sample_paths_through",
    "read_path_csv",
    "write_path_csv",
]

# relative tolerance (times T) when matching times against grid nodes
TIME_RTOL = 1e-12


@dataclass(frozen=True)
class BridgeSpec:
    """Parameters of the pinned process and the discount rate.

    ``strike`` is both the option strike and the terminal value of the bridge.
    """

    strike: float
    horizon: float
    sigma: float
    discount: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.strike):
            raise ValueError(f"strike must be finite, got {self.strike}")
        if not self.horizon > 0:
            raise ValueError(f"horizon must be > 0, got {self.horizon}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if not self.discount >= 0:
            raise ValueError(f"discount must be >= 0, got {self.discount}")

    def replace(self, **changes) -> "BridgeSpec":
        fields = {"strike": self.strike, "horizon": self.horizon,
                  "sigma": self.sigma, "discount": self.discount}
        fields.update(changes)
        return BridgeSpec(**fields)

    def to_dict(self) -> dict:
        return {"S": self.strike, "T": self.horizon,
                "sigma": self.sigma, "lambda": self.discount}


class TimeGrid:
    """Strictly increasing partition ``0 = t_0 < ... < t_N = T`` with N >= 2.

    A grid restricted to ``[t0, T]`` (as used for sampling from an interior
    start) is built with ``TimeGrid(nodes, start=t0)``.
    """

    __slots__ = ("nodes",)

    def __init__(self, nodes: Sequence[float], start: float = 0.0):
        nodes = np.array(nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 3:
            raise ValueError("a time grid needs at least 3 nodes (N >= 2)")
        if nodes[0] != start:
            raise ValueError(f"grid must start at {start}, got {nodes[0]}")
        if not np.all(np.diff(nodes) > 0):
            raise ValueError("grid nodes must be strictly increasing")
        nodes.setflags(write=False)
        self.nodes = nodes

    @property
    def N(self) -> int:
        return self.nodes.size - 1

    @property
    def horizon(self) -> float:
        return float(self.nodes[-1])

    def __len__(self):
        return self.nodes.size

    def __repr__(self):
        return f"TimeGrid(N={self.N}, start={self.nodes[0]}, T={self.horizon})"

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.nodes, other.nodes)

    def index_of(self, t: float) -> int:
        """Index of the node equal to ``t`` up to ``TIME_RTOL * T``; raises if absent."""
        return node_index(self.nodes, t)

    @classmethod
    def uniform(cls, N: int, horizon: float, start: float = 0.0) -> "TimeGrid":
        nodes = start + (horizon - start) * np.arange(N + 1) / N
        nodes[-1] = horizon
        return cls(nodes, start=start)


@dataclass(frozen=True)
class PricePath:
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if times.shape != values.shape or times.ndim != 1:
            raise ValueError("times and values must be 1-d sequences of equal length")
        if times.size == 0:
            raise ValueError("empty path")
        if not np.all(np.diff(times) > 0):
            raise ValueError("path times must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise ValueError("path values must be finite")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.times.size

    def slice(self, start: int, stop: int | None = None) -> "PricePath":
        return PricePath(self.times[start:stop], self.values[start:stop])


def node_index(nodes: np.ndarray, t: float) -> int:
    tol = TIME_RTOL * max(abs(float(nodes[-1])), 1.0)
    i = int(np.searchsorted(nodes, t - tol))
    if i < nodes.size and abs(nodes[i] - t) <= tol:
        return i
    raise ValueError(f"time {t} is not a grid node")


def _check_times(t, u, T):
    if not t < T:
        raise ValueError(f"start time t={t} must be < T={T}")
    if np.any(u < t) or np.any(u > T):
        raise ValueError(f"u must lie in [t, T] = [{t}, {T}]")


def bridge_mean(t: float, x, u, spec: BridgeSpec):
    """Conditional mean of ``X_u`` given ``X_t = x``."""
    T = spec.horizon
    _check_times(t, u, T)
    return x * (T - u) / (T - t) + spec.strike * (u - t) / (T - t)


def bridge_stddev(t: float, u, spec: BridgeSpec, sigma: float | None = None):
    """Conditional standard deviation of ``X_u`` given ``X_t``.

    ``sigma`` overrides ``spec.sigma`` (the likelihood uses unit volatility).
    """
    T = spec.horizon
    _check_times(t, u, T)
    s = spec.sigma if sigma is None else sigma
    return s * np.sqrt((u - t) * (T - u) / (T - t))


def marginal_quantile(t: float, q: float, t0: float, x0: float, spec: BridgeSpec) -> float:
    """q-quantile of ``X_t`` for the bridge started at ``(t0, x0)``."""
    if not 0 < q < 1:
        raise ValueError(f"quantile level must be in (0, 1), got {q}")
    if not t0 < t < spec.horizon:
        raise ValueError(f"need t0 < t < T, got t0={t0}, t={t}, T={spec.horizon}")
    return float(bridge_mean(t0, x0, t, spec) + bridge_stddev(t0, t, spec) * ndtri(q))


def _as_nodes(grid, t0: float, T: float) -> np.ndarray:
    nodes = grid.nodes if isinstance(grid, TimeGrid) else np.asarray(grid, dtype=float)
    if nodes.size == 0:
        raise ValueError("empty grid")
    if nodes.size < 2:
        raise ValueError("grid needs at least two nodes")
    tol = TIME_RTOL * max(abs(T), 1.0)
    if abs(nodes[0] - t0) > tol or abs(nodes[-1] - T) > tol:
        raise ValueError(f"grid must run from t0={t0} to T={T}")
    if not np.all(np.diff(nodes) > 0):
        raise ValueError("grid nodes must be strictly increasing")
    return nodes


def _bridge_from_normals(nodes, x0, S, sigma, z):
    """Bridge values on ``nodes`` from standard normals ``z`` (shape (..., len(nodes) - 1)).

    Re-rooting the bridge at every node gives
    ``X_i ~ N(mu(t_{i-1}, X_{i-1}, t_i), nu(t_{i-1}, t_i)^2)``; in the variable
    ``Y = (X - S) / (T - t)`` that recursion is a Gaussian random walk, so the
    sequential scheme is a cumulative sum.
    """
    T = nodes[-1]
    rem = T - nodes
    dt = np.diff(nodes)
    steps = np.zeros(dt.shape)
    # last step lands on T where Y is undefined; X_T = S by construction
    steps[:-1] = sigma * np.sqrt(dt[:-1] / (rem[:-2] * rem[1:-1]))
    y0 = (np.asarray(x0, dtype=float) - S) / rem[0]
    walk = np.cumsum(z[..., :-1] * steps[:-1], axis=-1)
    out = np.empty(z.shape[:-1] + (nodes.size,))
    out[..., 0] = x0
    out[..., 1:-1] = S + (y0[..., None] + walk) * rem[1:-1]
    out[..., -1] = S
    return out


def sample_path(t0: float, x0: float, grid, spec: BridgeSpec, seed=None,
                sigma: float | None = None) -> PricePath:
    """One exact bridge path from ``(t0, x0)`` to ``(T, S)`` on ``grid``.

    ``sigma`` overrides the spec volatility; ``sigma=0`` is accepted here as a
    degenerate zero-noise mode that returns the straight line to ``(T, S)``.
    """
    nodes = _as_nodes(grid, t0, spec.horizon)
    vol = spec.sigma if sigma is None else float(sigma)
    if vol < 0:
        raise ValueError("sigma must be >= 0")
    z = np.random.default_rng(seed).standard_normal(nodes.size - 1)
    values = _bridge_from_normals(nodes, np.float64(x0), spec.strike, vol, z)
    return PricePath(nodes.copy(), values)


def sample_paths(t0: float, x0: float, grid, spec: BridgeSpec, seeds) -> np.ndarray:
    """Stack of bridge paths, one per seed, as an array of shape (len(seeds), len(grid)).

    Row ``k`` is bitwise identical to ``sample_path(..., seed=seeds[k]).values``.
    """
    nodes = _as_nodes(grid, t0, spec.horizon)
    z = np.stack([np.random.default_rng(s).standard_normal(nodes.size - 1) for s in seeds])
    x0 = np.full(len(seeds), float(x0))
    return _bridge_from_normals(nodes, x0, spec.strike, spec.sigma, z)


def sample_path_through(t0: float, x0: float, t_mid: float, x_mid: float, grid,
                        spec: BridgeSpec, seed=None) -> PricePath:
    """Bridge path from ``(t0, x0)`` forced through ``(t_mid, x_mid)``, ending at ``(T, S)``.

    The two segments are independent bridges; the first one is pinned at
    ``x_mid`` instead of ``S``.
    """
    nodes = _as_nodes(grid, t0, spec.horizon)
    if not t0 < t_mid < spec.horizon:
        raise ValueError("t_mid must lie strictly inside (t0, T)")
    k = node_index(nodes, t_mid)
    return PricePath(nodes.copy(), _through(nodes, k, x0, x_mid, spec, [seed])[0])


def sample_paths_through(t0: float, x0: float, t_mid: float, x_mid: float, grid,
                         spec: BridgeSpec, seeds) -> np.ndarray:
    """Batched :func:`sample_path_through`; row ``k`` uses ``seeds[k]``."""
    nodes = _as_nodes(grid, t0, spec.horizon)
    if not t0 < t_mid < spec.horizon:
        raise ValueError("t_mid must lie strictly inside (t0, T)")
    return _through(nodes, node_index(nodes, t_mid), x0, x_mid, spec, list(seeds))


def _through(nodes, k, x0, x_mid, spec, seeds) -> np.ndarray:
    """Rows of paths pinned at node ``k`` to ``x_mid``; one row per seed."""
    head, tail = nodes[: k + 1], nodes[k:]
    m = len(seeds)
    out = np.empty((m, nodes.size))
    z = np.stack([np.random.default_rng(s).standard_normal(nodes.size - 1) for s in seeds])
    # first segment is a bridge on [t0, t_mid] pinned at x_mid
    out[:, : k + 1] = _bridge_from_normals(
        head, np.full(m, float(x0)), float(x_mid), spec.sigma, z[:, :k])
    out[:, k:] = _bridge_from_normals(
        tail, np.full(m, float(x_mid)), spec.strike, spec.sigma, z[:, k:])
    return out


def read_path_csv(path) -> PricePath:
    """Read a ``t,x`` CSV."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"t", "x"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected header 't,x'")
        rows = [(float(r["t"]), float(r["x"])) for r in reader]
    if not rows:
        raise ValueError(f"{path}: no rows")
    t, x = zip(*rows)
    return PricePath(np.array(t), np.array(x))


def write_path_csv(path_obj: PricePath, dest) -> Path:
    dest = Path(dest)
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x"])
        for t, x in zip(path_obj.times, path_obj.values):
            w.writerow([repr(float(t)), repr(float(x))])
    return dest

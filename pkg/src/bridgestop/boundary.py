"""Free-boundary solver for the American put on a pinned Brownian bridge.

The boundary ``b`` solves

    b(t) = S - int_t^T K(t, b(t), u, b(u)) du,

which is discretised with right Riemann sums on ``[t_i, t_{N-1}]``; the
last subinterval, where the kernel blows up, is replaced by half of an
explicit upper bound ``H``. Nodes are then resolved backwards from
``b(T) = S`` by fixed-point iteration.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import integrate
from scipy.interpolate import CubicSpline
from scipy.special import ndtr

from .bridge import BridgeSpec, TimeGrid, bridge_mean, bridge_stddev

__all__ = [
    "SHEPP_CONSTANT",
    "SolverConfig",
    "Boundary",
    "SolverError",
    "GridTooCoarseError",
    "NonConvergenceError",
    "kernel",
    "log_grid",
    "solve_boundary",
    "closed_form_boundary_lambda0",
    "call_boundary_from_put",
    "rescale_boundary",
    "value_function",
    "tail_bound",
    "read_boundary_csv",
    "write_boundary_csv",
    "write_boundary_json",
    "read_boundary_json",
]

# Shepp's constant to 4 decimals; deliberately not refined
SHEPP_CONSTANT = 0.8399

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class SolverError(RuntimeError):
    """Base class for boundary solver failures."""


class GridTooCoarseError(SolverError):
    def __init__(self, node: int, time: float, reason: str):
        self.node = node
        self.time = time
        super().__init__(f"grid too coarse at node {node} (t={time:.12g}): {reason}")


class NonConvergenceError(SolverError):
    def __init__(self, node: int, time: float, last: float, residual: float, iterations: int):
        self.node = node
        self.time = time
        self.last = last
        self.residual = residual
        self.iterations = iterations
        super().__init__(
            f"fixed point did not converge at node {node} (t={time:.12g}) after "
            f"{iterations} iterations: last iterate {last!r}, relative change {residual:.3g}"
        )


@dataclass(frozen=True)
class SolverConfig:
    grid: TimeGrid
    delta: float = 1e-3
    max_iter: int = 1000

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")


def log_grid(N: int, T: float) -> TimeGrid:
    """Nodes ``log(1 + (i/N)(e^T - 1))``: spacing shrinks smoothly towards ``T``."""
    if N < 2:
        raise ValueError(f"N must be >= 2, got {N}")
    i = np.arange(N + 1)
    nodes = np.log1p(i / N * np.expm1(T))
    nodes[0], nodes[-1] = 0.0, T
    return TimeGrid(nodes)


@dataclass
class Boundary:
    """Boundary sampled on a grid, interpolated by a cubic spline.

    ``exact`` (optional) is an analytic curve used instead of the spline when
    the boundary is known in closed form.
    """

    grid: TimeGrid
    values: np.ndarray
    side: str = "put"
    spec: BridgeSpec | None = None
    iterations: np.ndarray | None = None
    delta: float | None = None
    exact: Callable[[np.ndarray], np.ndarray] | None = field(default=None, repr=False, compare=False)
    _spline: CubicSpline | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.nodes.shape:
            raise ValueError("boundary values must match the grid")
        if self.side not in ("put", "call"):
            raise ValueError(f"side must be 'put' or 'call', got {self.side!r}")

    @property
    def times(self) -> np.ndarray:
        return self.grid.nodes

    def __call__(self, t):
        if self.exact is not None:
            return self.exact(np.asarray(t, dtype=float))
        if self._spline is None:
            self._spline = CubicSpline(self.grid.nodes, self.values)
        return self._spline(t)


def kernel(t: float, x1: float, u, x2, spec: BridgeSpec):
    """Integrand of the pricing formula, vectorised over ``u`` and ``x2``.

    At ``u = t`` the continuous limit is returned:
    ``(1/(T-t) + lambda) * (S - x1)`` times 1, 1/2 or 0 as ``x2 >``, ``==`` or
    ``< x1``.
    """
    T, S, lam = spec.horizon, spec.strike, spec.discount
    u = np.asarray(u, dtype=float)
    if np.any(u >= T):
        raise ValueError("kernel is singular at u = T")
    x2 = np.asarray(x2, dtype=float)
    mu = bridge_mean(t, x1, u, spec)
    nu = bridge_stddev(t, u, spec)
    rate = np.exp(-lam * (u - t)) * (1.0 / (T - u) + lam)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (x2 - mu) / nu
        body = (S - mu) * ndtr(z) + nu * _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    at_start = nu == 0
    if np.any(at_start):
        step = np.where(x2 > x1, 1.0, np.where(x2 == x1, 0.5, 0.0))
        body = np.where(at_start, (S - x1) * step, body)
    body = np.where(np.isneginf(x2), 0.0, body)
    out = rate * body
    return out if out.ndim else float(out)


def tail_bound(t: float, x: float, t_last: float, spec: BridgeSpec) -> float:
    """Closed-form upper bound ``H`` of the kernel integral over ``[t_last, T]``."""
    T, S, lam, sigma = spec.horizon, spec.strike, spec.discount, spec.sigma
    d = T - t_last
    return math.exp(-lam * (t_last - t)) * (
        (S - x) * d / (T - t) * (1.0 + 0.5 * lam * d)
        + sigma * math.sqrt(2.0 * d / math.pi) * (1.0 + lam * d / 3.0)
    )


def _last_node(S, sigma, lam, d):
    return (0.5 * S * (1.0 - 0.5 * lam * d)
            - sigma * math.sqrt(d / (2.0 * math.pi)) * (1.0 + lam * d / 3.0)) / (0.5 - 0.25 * lam * d)


def _solve_nodes(nodes, S, sigma, lam, delta, max_iter):
    """Algorithm 1 on raw arrays; returns (values, iterations per node)."""
    N = nodes.size - 1
    T = nodes[-1]
    d = T - nodes[N - 1]
    if not lam * d < 1.0:
        raise GridTooCoarseError(N - 1, float(nodes[N - 1]),
                                 f"lambda * (T - t_(N-1)) = {lam * d:.6g} must be < 1")
    ti = nodes[: N - 1]
    rem = T - ti
    tail_disc = np.exp(-lam * (nodes[N - 1] - ti))
    growth = 1.0 + 0.5 * lam * d
    denom = 1.0 - 0.5 * tail_disc * growth * d / rem
    bad = np.flatnonzero(~(denom > 0))
    if bad.size:
        i = int(bad[-1])
        raise GridTooCoarseError(i, float(nodes[i]), f"fixed-point denominator {denom[i]:.6g} <= 0")
    consts = S - 0.5 * tail_disc * (S * d / rem * growth
                                    + sigma * math.sqrt(2.0 * d / math.pi) * (1.0 + lam * d / 3.0))

    b = np.empty(N + 1)
    its = np.zeros(N + 1, dtype=int)
    b[N] = S
    b[N - 1] = _last_node(S, sigma, lam, d)
    weights = np.diff(nodes)
    u_all = nodes[: N]
    for i in range(N - 2, -1, -1):
        t = nodes[i]
        u = u_all[i + 1:]
        bj = b[i + 1: N]
        r = T - t
        a = (T - u) / r
        drift = S * (u - t) / r
        nu = sigma * np.sqrt((u - t) * (T - u) / r)
        wk = weights[i:N - 1] * np.exp(-lam * (u - t)) * (1.0 / (T - u) + lam)
        c, den = consts[i], denom[i]
        x = b[i + 1]
        for k in range(1, max_iter + 1):
            mu = x * a + drift
            z = (bj - mu) / nu
            s = np.dot(wk, (S - mu) * ndtr(z) + nu * _INV_SQRT_2PI * np.exp(-0.5 * z * z))
            new = (c - s) / den
            eps = abs(x - new) / abs(x) if x != 0 else abs(x - new)
            x = new
            if not math.isfinite(x):
                raise NonConvergenceError(i, float(t), x, float("nan"), k)
            if eps <= delta:
                break
        else:
            raise NonConvergenceError(i, float(t), x, eps, max_iter)
        b[i] = x
        its[i] = k
    return b, its


def solve_boundary(spec: BridgeSpec, config: SolverConfig) -> Boundary:
    """Put-side boundary on ``config.grid`` by backward fixed-point recursion."""
    nodes = config.grid.nodes
    if abs(nodes[-1] - spec.horizon) > 1e-12 * spec.horizon:
        raise ValueError("grid must end at the spec horizon")
    values, its = _solve_nodes(nodes, spec.strike, spec.sigma, spec.discount,
                               config.delta, config.max_iter)
    return Boundary(config.grid, values, "put", spec, its, config.delta)


def fixed_point_map(spec: BridgeSpec, boundary: Boundary, i: int, x: float) -> float:
    """One application of the node-``i`` update to trial value ``x``."""
    nodes = boundary.grid.nodes
    N = nodes.size - 1
    if not 0 <= i <= N - 2:
        raise ValueError("node must satisfy 0 <= i <= N-2")
    S, sigma, lam, T = spec.strike, spec.sigma, spec.discount, spec.horizon
    d = T - nodes[N - 1]
    t = nodes[i]
    u = nodes[i + 1:N]
    w = np.diff(nodes)[i:N - 1]
    s = float(np.dot(w, kernel(t, x, u, boundary.values[i + 1:N], spec)))
    growth = 1.0 + 0.5 * lam * d
    disc = math.exp(-lam * (nodes[N - 1] - t))
    den = 1.0 - 0.5 * disc * growth * d / (T - t)
    c = S - 0.5 * disc * (S * d / (T - t) * growth
                          + sigma * math.sqrt(2.0 * d / math.pi) * (1.0 + lam * d / 3.0))
    return (c - s) / den


def _closed_form_curve(S, T, sigma, t):
    return S - SHEPP_CONSTANT * sigma * np.sqrt(np.maximum(T - t, 0.0))


def closed_form_boundary_lambda0(spec: BridgeSpec, grid: TimeGrid | None = None) -> Boundary:
    """``S - B sigma sqrt(T - t)``: the exact boundary when there is no discounting."""
    if spec.discount != 0:
        raise ValueError("the closed form only holds for lambda = 0")
    grid = grid if grid is not None else log_grid(200, spec.horizon)
    curve = partial(_closed_form_curve, spec.strike, spec.horizon, spec.sigma)
    return Boundary(grid, curve(grid.nodes), "put", spec, exact=curve)


def call_boundary_from_put(put: Boundary, S: float) -> Boundary:
    """Reflect a put boundary about the strike: ``2S - b``."""
    if put.side != "put":
        raise ValueError("expected a put-side boundary")
    return Boundary(put.grid, 2.0 * S - put.values, "call", put.spec, put.iterations, put.delta)


def put_boundary_from_call(call: Boundary, S: float) -> Boundary:
    if call.side != "call":
        raise ValueError("expected a call-side boundary")
    return Boundary(call.grid, 2.0 * S - call.values, "put", call.spec, call.iterations, call.delta)


def scaled_spec(spec: BridgeSpec) -> BridgeSpec:
    """Unit-volatility problem equivalent to ``spec`` under ``Y_s = sigma^(-1/2) X_(s/sigma)``.

    Time runs ``sigma`` times faster, so the discount rate becomes ``lambda / sigma``.
    """
    s = spec.sigma
    return BridgeSpec(spec.strike / math.sqrt(s), spec.horizon * s, 1.0, spec.discount / s)


def rescale_boundary(b: Boundary, sigma: float, grid: TimeGrid | None = None) -> Boundary:
    """Map a unit-volatility boundary on ``[0, sigma T]`` back to volatility ``sigma``.

    Returns ``t -> sigma^(1/2) b(sigma t)`` on ``grid`` (default: ``b``'s nodes divided
    by ``sigma``). Nodes that coincide with ``b``'s scaled nodes are taken
    exactly; others are spline-interpolated.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if grid is None:
        nodes = b.grid.nodes / sigma
        nodes[-1] = b.grid.nodes[-1] / sigma
        grid = TimeGrid(nodes)
        src = b.values
    else:
        src = b(sigma * grid.nodes)
    spec = None
    if b.spec is not None:
        spec = BridgeSpec(b.spec.strike * math.sqrt(sigma), b.spec.horizon / sigma,
                          sigma, b.spec.discount * sigma)
    return Boundary(grid, math.sqrt(sigma) * np.asarray(src), b.side, spec, b.iterations, b.delta)


def _tail_integral(t: float, x: float, start: float, b: Boundary, spec: BridgeSpec) -> float:
    # u = T - s^2 removes the 1/sqrt(T-u) singularity of the kernel
    T = spec.horizon

    def f(s):
        u = T - s * s
        return 2.0 * s * kernel(t, x, u, float(b(u)), spec)

    val, _ = integrate.quad(f, 0.0, math.sqrt(T - start), limit=200, epsabs=1e-12, epsrel=1e-10)
    return val


def value_function(t: float, x: float, b: Boundary, spec: BridgeSpec, refine: int = 2,
                   tail: str = "bound") -> float:
    """Put value ``V(t, x)`` from the boundary via the pricing integral.

    Composite Simpson over the solver nodes in ``[t, t_(N-1)]`` (each grid
    interval split into ``refine`` panels), plus the last interval.

    ``tail="bound"`` uses ``H/2`` there, the same estimate as the solver. It is
    accurate for ``x`` near the boundary but degrades far above it (it can even
    go negative). ``tail="quad"`` integrates the last interval adaptively.
    """
    T = spec.horizon
    if not 0 <= t < T:
        raise ValueError(f"need 0 <= t < T, got t={t}")
    if b.side != "put":
        raise ValueError("value_function expects a put-side boundary")
    if tail not in ("bound", "quad"):
        raise ValueError(f"tail must be 'bound' or 'quad', got {tail!r}")
    nodes = b.grid.nodes
    t_last = float(nodes[-2])
    if t >= t_last:
        if tail == "quad":
            return _tail_integral(t, x, t, b, spec)
        return 0.5 * tail_bound(t, x, t, spec)
    inner = nodes[(nodes > t) & (nodes <= t_last)]
    knots = np.concatenate(([t], inner))
    if refine > 1:
        frac = np.arange(refine) / refine
        knots = np.concatenate([(a + frac * (c - a)) for a, c in zip(knots[:-1], knots[1:])]
                               + [knots[-1:]])
    mids = 0.5 * (knots[:-1] + knots[1:])
    bvals = np.asarray(b(knots))
    f_knots = kernel(t, x, knots, bvals, spec)
    f_mids = kernel(t, x, mids, b(mids), spec)
    h = np.diff(knots)
    integral = float(np.sum(h / 6.0 * (f_knots[:-1] + 4.0 * f_mids + f_knots[1:])))
    if tail == "quad":
        return integral + _tail_integral(t, x, t_last, b, spec)
    return integral + 0.5 * tail_bound(t, x, t_last, spec)


def write_boundary_csv(b: Boundary, dest) -> Path:
    dest = Path(dest)
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "b"])
        for t, v in zip(b.grid.nodes, b.values):
            w.writerow([repr(float(t)), repr(float(v))])
    return dest


def read_boundary_csv(src, side: str = "put") -> Boundary:
    """Load an external ``t,b`` boundary (e.g. a comparator strategy)."""
    with open(src, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"t", "b"} <= set(reader.fieldnames):
            raise ValueError(f"{src}: expected header 't,b'")
        rows = [(float(r["t"]), float(r["b"])) for r in reader]
    if len(rows) < 3:
        raise ValueError(f"{src}: need at least 3 rows")
    t, v = map(np.array, zip(*rows))
    return Boundary(TimeGrid(t, start=float(t[0])), v, side)


def write_boundary_json(b: Boundary, dest) -> Path:
    dest = Path(dest)
    doc = {
        "spec": b.spec.to_dict() if b.spec is not None else None,
        "side": b.side,
        "grid": [float(t) for t in b.grid.nodes],
        "values": [float(v) for v in b.values],
        "solver": {
            "delta": b.delta,
            "N": b.grid.N,
            "iterations-per-node": None if b.iterations is None else [int(k) for k in b.iterations],
        },
    }
    dest.write_text(json.dumps(doc, indent=2) + "\n")
    return dest


def read_boundary_json(src) -> Boundary:
    doc = json.loads(Path(src).read_text())
    spec = None
    if doc.get("spec"):
        s = doc["spec"]
        spec = BridgeSpec(s["S"], s["T"], s["sigma"], s["lambda"])
    solver = doc.get("solver") or {}
    its = solver.get("iterations-per-node")
    grid = TimeGrid(doc["grid"], start=doc["grid"][0])
    return Boundary(grid, doc["values"], doc["side"], spec,
                    None if its is None else np.array(its), solver.get("delta"))

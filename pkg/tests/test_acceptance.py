"""Acceptance criteria, each at its stated tolerance with seed 0.

Every test carries a ``criterion`` marker; the conftest hook prints one
PASS/FAIL line per criterion at the end of the session.
"""
import math
import time

import numpy as np
import pytest

from bridgestop.boundary import (SolverConfig, call_boundary_from_put, log_grid, rescale_boundary,
                                 scaled_spec, solve_boundary, value_function)
from bridgestop.bridge import BridgeSpec, PricePath, TimeGrid, sample_path, sample_paths, write_path_csv
from bridgestop.cli import main
from bridgestop.inference import coverage_experiment, mle_sigma
from bridgestop.simulation import ExperimentConfig, StoppingRule, monte_carlo_value, run_payoff_study

SPEC = BridgeSpec(10.0, 1.0, 1.0, 0.0)
SEED = 0


def _cf(t):
    return 10.0 - 0.8399 * np.sqrt(1.0 - t)


@pytest.fixture(scope="module")
def solved():
    out = {}
    for N in (20, 50, 100, 200):
        start = time.perf_counter()
        b = solve_boundary(SPEC, SolverConfig(log_grid(N, 1.0), delta=1e-3))
        out[N] = (b, time.perf_counter() - start)
    return out


def _sup_error(b):
    return float(np.max(np.abs(b.values - _cf(b.grid.nodes))))


# --- 1 --------------------------------------------------------------------------------

@pytest.mark.criterion("1a closed-form oracle: sup error <= 0.02 at N=200, runtime <= 30 s")
def test_c1_closed_form_error(solved):
    b, secs = solved[200]
    err = _sup_error(b)
    print(f"N=200 sup error {err:.5f}, {secs:.2f} s")
    assert err <= 0.02 and secs <= 30


@pytest.mark.criterion("1b closed-form oracle: sup error weakly decreasing over N in {20,50,100,200}")
def test_c1_error_decreases_with_N(solved):
    errs = [_sup_error(solved[N][0]) for N in (20, 50, 100, 200)]
    print("sup errors", [f"{e:.5f}" for e in errs])
    assert all(b <= a for a, b in zip(errs, errs[1:]))


# --- 2 --------------------------------------------------------------------------------

@pytest.mark.criterion("2 last-node closed form at lambda=0 to 1e-12 relative")
def test_c2_last_node(solved):
    for N in (20, 200):
        b = solved[N][0]
        d = 1.0 - b.grid.nodes[-2]
        expected = 10.0 - 2.0 * math.sqrt(d / (2 * math.pi))
        assert b.values[-2] == pytest.approx(expected, rel=1e-12, abs=0)


# --- 3 --------------------------------------------------------------------------------

@pytest.mark.criterion("3 parity to machine precision and sigma-rescaled solve within 2x tolerance")
def test_c3_parity_and_scaling(solved):
    put = solved[200][0]
    call = call_boundary_from_put(put, 10.0)
    np.testing.assert_array_equal(call.values, 2 * 10.0 - put.values)
    direct_call = solve_boundary(SPEC, SolverConfig(log_grid(200, 1.0)))
    np.testing.assert_allclose(call_boundary_from_put(direct_call, 10.0).values, call.values,
                               rtol=0, atol=4 * np.finfo(float).eps * 10)
    for sigma, lam in ((2.0, 0.0), (0.5, 0.5)):
        spec = SPEC.replace(sigma=sigma, discount=lam)
        grid = log_grid(200, 1.0)
        direct = solve_boundary(spec, SolverConfig(grid, delta=1e-3))
        unit = solve_boundary(scaled_spec(spec), SolverConfig(TimeGrid(grid.nodes * sigma), delta=1e-3))
        back = rescale_boundary(unit, sigma, grid)
        np.testing.assert_allclose(back.values, direct.values, rtol=2 * 1e-3)


# --- 4 --------------------------------------------------------------------------------

@pytest.mark.criterion("4a V(t, b(t)) = S - b(t) within 1e-3*S at 20 nodes")
def test_c4_value_on_boundary(solved):
    b = solved[200][0]
    worst = 0.0
    for i in np.linspace(0, 198, 20).astype(int):
        t, x = b.grid.nodes[i], b.values[i]
        worst = max(worst, abs(value_function(t, x, b, SPEC) - (10.0 - x)))
    print(f"max |V - (S - b)| = {worst:.5f}")
    assert worst <= 1e-3 * 10.0


@pytest.mark.criterion("4b V(0, S) quadrature vs 1e5-path Monte Carlo within 3 SE, runtime <= 2 min")
def test_c4_value_vs_monte_carlo(solved):
    b = solved[200][0]
    start = time.perf_counter()
    v = value_function(0.0, 10.0, b, SPEC)
    mean, se = monte_carlo_value(0.0, 10.0, StoppingRule(b, 10.0), SPEC, b.grid, 100_000, seed=SEED)
    secs = time.perf_counter() - start
    print(f"quadrature {v:.5f}, Monte Carlo {mean:.5f} +- {se:.5f} (z = {(mean - v) / se:+.2f}), {secs:.1f} s")
    assert abs(v - mean) <= 3 * se and secs <= 120


# --- 5 --------------------------------------------------------------------------------

@pytest.mark.criterion("5 var of sqrt(n)(sigma_hat - 1) in [0.425, 0.575] over 1e3 replications")
def test_c5_mle_asymptotics():
    # 201 equal steps: the final one lands on the pinned value and carries no information
    g = TimeGrid.uniform(201, 1.0)
    seeds = [np.random.SeedSequence(SEED, spawn_key=(k,)) for k in range(1000)]
    X = sample_paths(0.0, 10.0, g, SPEC, seeds)
    z = [math.sqrt(200) * (mle_sigma(PricePath(g.nodes, row), 10.0, 1.0, 200).sigma_hat - 1) for row in X]
    var = float(np.var(z, ddof=1))
    print(f"sample variance {var:.4f}")
    assert 0.425 <= var <= 0.575


# --- 6 --------------------------------------------------------------------------------

@pytest.mark.criterion("6 coverage: >= 90% of interior nodes within alpha +- 3 binomial SD (M=200)")
def test_c6_coverage():
    M, alpha = 200, 0.05
    res = coverage_experiment(1.0, 66, 200, M, alpha, SPEC, seed=SEED)
    inside = res.within_reference(3 * math.sqrt(alpha * (1 - alpha) / M))[1:-1]
    frac = float(inside.mean())
    print(f"{frac:.3f} of interior nodes inside, {res.failures} failed replications")
    assert frac >= 0.90


# --- 7 --------------------------------------------------------------------------------

CELLS = dict(nodes=[40, 80, 120, 160], quantiles=[0.2, 0.4, 0.6, 0.8], M=200, seed=SEED)


@pytest.mark.criterion("7a r=25: estimated-rule mean within 3 paired SE of true-rule mean in every cell")
def test_c7_estimated_matches_true():
    table = run_payoff_study(ExperimentConfig(r=25, **CELLS))
    bad = []
    for i, q in table.cells():
        d, se = table.paired(i, q, "estimated", "true")
        if not abs(d) <= 3 * se:
            bad.append((i, q, d, se))
    print(f"{len(table.cells()) - len(bad)}/{len(table.cells())} cells within 3 paired SE", bad)
    assert not bad


@pytest.mark.criterion("7b r=1: variance ordering upper <= center <= lower in > 75% of cells")
def test_c7_variance_ordering():
    table = run_payoff_study(ExperimentConfig(r=1, **CELLS))
    ok = 0
    for i, q in table.cells():
        v = {r: table.stats(i, q, r)["variance"] for r in ("upper", "estimated", "lower")}
        ok += v["upper"] <= v["estimated"] <= v["lower"]
    print(f"ordering holds in {ok}/{len(table.cells())} cells")
    assert ok > 0.75 * len(table.cells())


# --- 8 --------------------------------------------------------------------------------

def _bundle(root):
    d = root / "bundle"
    d.mkdir()
    (d / "meta.csv").write_text("id,strike,expiry\na,20,30\nb,50,30\n")
    rng = np.random.default_rng(SEED)
    for name, strike in (("a", 20.0), ("b", 50.0)):
        x = strike + np.cumsum(rng.normal(0, 0.2, 31))
        x -= np.linspace(0, x[-1] - strike * 1.003, 31)
        (d / f"path_{name}.csv").write_text("t,x\n" + "".join(f"{k},{float(v)!r}\n" for k, v in enumerate(x)))
        (d / f"oi_{name}.csv").write_text("day,oi\n0,10\n1,12\n2,7\n")
    return d


def _commands(root):
    path = write_path_csv(sample_path(0.0, 10.0, TimeGrid.uniform(200, 1.0), SPEC, seed=SEED),
                          root / "path.csv")
    (root / "cov.json").write_text('{"M": 8, "seed": 0}')
    (root / "pay.json").write_text('{"M": 8, "nodes": [60, 140], "quantiles": [0.3], "seed": 0}')
    bundle = _bundle(root)
    common = ["--strike", "10", "--horizon", "1", "--sigma", "1"]
    return {
        "solve": ["solve", *common, "--lambda", "0.2"],
        "price": ["price", *common, "--x", "10", "--mc-paths", "4000", "--seed", "0"],
        "infer": ["infer", "--path", str(path), "--use-fraction", "0.33"],
        "coverage": ["study", "--kind", "coverage", "--config", str(root / "cov.json")],
        "payoff": ["study", "--kind", "payoff", "--config", str(root / "pay.json")],
        "data": ["data", "--bundle", str(bundle), "--rhos", "0.3,0.6", "--thresholds", "0.002,0.01"],
    }


def _snapshot(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


@pytest.mark.criterion("8 determinism: byte-identical outputs across reruns and workers {1, 4}")
def test_c8_determinism(tmp_path):
    for name, argv in _commands(tmp_path).items():
        runs = []
        for tag, workers in (("a", 1), ("b", 1), ("c", 4)):
            out = tmp_path / f"{name}-{tag}"
            assert main([*argv, "--workers", str(workers), "--out", str(out)]) == 0, name
            runs.append(_snapshot(out))
        assert runs[0] == runs[1], f"{name}: rerun differs"
        assert runs[0] == runs[2], f"{name}: workers 1 vs 4 differ"

"""Acceptance suite.

Every criterion records a PASS/FAIL line that is printed in the pytest
terminal summary.  Rules come from the cache directory (``$DQMIX_RULE_CACHE``,
default ``<repo>/rules``) and are generated there when missing.  Criteria 6
to 10 share two complete desk-scale study runs (d=5, both covariance
structures, 10 resamples of N=500) made in fresh directories.
"""

import math
import os
from pathlib import Path

import numpy as np
import pytest

from dqmix.dqgen import InfeasibleRuleError, MomentSystem, cached_rule, generate_dq, residual
from dqmix.mmnl import MmnlParams, simulated_loglik, simulated_loglik_gradient
from dqmix.multiindex import eval_multivariate, tensor_rule, total_order_set
from dqmix.orthopoly import gauss_rule_1d, raw_moment
from dqmix.simstudy import DgpSpec, desk_config, generate_dataset, run_study

RESULTS: dict = {}
ROOT = Path(__file__).resolve().parents[1]
RULE_CACHE = Path(os.environ.get("DQMIX_RULE_CACHE", ROOT / "rules"))

HALTON_GRID = ["halton@100", "halton@200", "halton@500", "halton@1000"]
DQ_GRID = ["dq@r5-n50", "dq@r6-n100", "dq@r7-n200"]


def record(number, title, ok, detail):
    RESULTS[number] = (ok, title, detail)
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} -- {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    config = desk_config(rule_cache=str(RULE_CACHE), methods=HALTON_GRID + DQ_GRID)
    dirs = tmp_path_factory.mktemp("desk-a"), tmp_path_factory.mktemp("desk-b")
    first = run_study(config, dirs[0])
    second = run_study(config, dirs[1])
    return dirs, first, second


def test_criterion_01_gaussian_exactness():
    # absolute error against the analytic moment; float64 nodes cannot meet 1e-10 once
    # moments reach ~1e5 and beyond, so the scaled error is recorded alongside
    worst, worst_scaled, first_bad = 0.0, 0.0, None
    for n in range(1, 16):
        rule = gauss_rule_1d("normal", n)
        for k in range(2 * n):
            terms = rule.nodes**k * rule.weights
            err = abs(math.fsum(terms) - raw_moment("normal", k))
            worst = max(worst, err)
            worst_scaled = max(worst_scaled, err / max(1.0, math.fsum(np.abs(terms))))
            if err > 1e-10 and first_bad is None:
                first_bad = (n, k)
    RESULTS[1.5] = (worst_scaled <= 1e-10, "Gaussian exactness, error scaled by moment size (informational)",
                    f"worst scaled error {worst_scaled:.2e}")
    detail = f"worst absolute moment error {worst:.2e} (tolerance 1e-10)"
    if first_bad:
        detail += f"; first exceeded at n={first_bad[0]}, degree {first_bad[1]}"
    record(1, "Gaussian exactness n=1..15", worst <= 1e-10, detail)


FRONTIER = [(3, 6, 30), (3, 7, 50), (5, 6, 100), (5, 7, 200), (10, 4, 100), (10, 5, 200)]


def test_criterion_02_feasibility_frontier():
    lines, ok = [], True
    for d, r, n in FRONTIER:
        try:
            rule = cached_rule("normal", d, r, n, RULE_CACHE, seed=0)
        except InfeasibleRuleError as exc:
            ok = False
            lines.append(f"(d={d},r={r},n={n}) infeasible, best {exc.best_residual:.1e}")
            continue
        eps = residual(MomentSystem.total_order("normal", d, r), rule.nodes, rule.weights)
        good = eps <= 1e-8 and bool(np.all(rule.weights > 0))
        ok &= good
        lines.append(f"(d={d},r={r},n={n}) eps {eps:.1e} kept {rule.n}")
    record(2, "DQ feasibility frontier", ok, "; ".join(lines))


def test_criterion_03_dq_equals_gauss_in_1d():
    worst = 0.0
    for n in (2, 3, 4):
        rule = generate_dq("normal", 1, 2 * n - 1, n, seed=0)
        gauss = gauss_rule_1d("normal", n)
        order = np.argsort(rule.nodes[0])
        worst = max(worst, np.max(np.abs(rule.nodes[0][order] - gauss.nodes)),
                    np.max(np.abs(rule.weights[order] - gauss.weights)))
    record(3, "DQ reproduces Gauss in 1D", worst <= 1e-6, f"max node/weight deviation {worst:.1e}")


def test_criterion_04_oracle_integration():
    dq = cached_rule("normal", 3, 6, 30, RULE_CACHE, seed=0)
    oracle = tensor_rule("normal", 3, 8)
    idx = total_order_set(3, 6)
    basis_dq = np.array([eval_multivariate("normal", a, dq.nodes) for a in idx])
    basis_or = np.array([eval_multivariate("normal", a, oracle.nodes) for a in idx])
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(20):
        c = rng.normal(size=len(idx))
        worst = max(worst, abs(c @ basis_dq @ dq.weights - c @ basis_or @ oracle.weights))
    record(4, "DQ vs tensor oracle, 20 random polynomials", worst <= 1e-6, f"max difference {worst:.1e}")


def test_criterion_05_gradient():
    spec = DgpSpec(3, "full", N=50)
    data = generate_dataset(spec, 5)
    rule = cached_rule("normal", 3, 6, 30, RULE_CACHE, seed=0)
    rng = np.random.default_rng(55)
    worst = 0.0
    h = 1e-5
    for _ in range(20):
        theta = spec.truth().to_vector() + rng.normal(scale=0.5, size=10)
        g = simulated_loglik_gradient(data, MmnlParams.from_vector(theta, 1, 3), rule)
        fd = np.empty_like(g)
        for k in range(theta.size):
            e = np.zeros_like(theta)
            e[k] = h
            fd[k] = (simulated_loglik(data, MmnlParams.from_vector(theta + e, 1, 3), rule)
                     - simulated_loglik(data, MmnlParams.from_vector(theta - e, 1, 3), rule)) / (2 * h)
        worst = max(worst, np.max(np.abs(g - fd)) / np.max(np.abs(g)))
    record(5, "analytic gradient vs central differences", worst <= 1e-6, f"max relative error {worst:.1e} over 20 points")


def test_criterion_06_positivity(desk_runs):
    _, report, _ = desk_runs
    fits = [r for c in report.cells for r in c.per_resample if "error" not in r]
    nonfinite = sum(not math.isfinite(r["loglik"]) for r in fits)
    nonpositive = sum(not r["min_probability"] > 0 for r in fits)
    ok = report.positivity_violations == 0 and nonfinite == 0 and nonpositive == 0 and len(fits) > 0
    record(6, "positive probabilities and real loglik", ok,
           f"{len(fits)} fits, {nonpositive} non-positive probabilities, {nonfinite} non-finite logliks, "
           f"{report.clamped_probabilities} clamped")


def _by_resample(cell, key):
    return {r["resample"]: r[key] for r in cell.per_resample if "error" not in r and r["converged"]}


def test_criterion_07_diagonal_trend(desk_runs):
    _, report, _ = desk_runs
    dq = report.cell(5, "diagonal", "dq@r6-n100")
    h1000 = report.cell(5, "diagonal", "halton@1000")
    h100 = report.cell(5, "diagonal", "halton@100")
    gap = abs(dq.mean_neg_loglik - h1000.mean_neg_loglik)
    a, b = _by_resample(dq, "loglik"), _by_resample(h100, "loglik")
    wins = sum(a[k] > b[k] for k in a if k in b)
    ok = gap <= 2.0 and wins >= 8
    record(7, "diagonal d=5 loglik trend", ok,
           f"|DQ r6 - Halton@1000| mean -loglik gap {gap:.3f} (<= 2.0); DQ beats Halton@100 on {wins}/10")


def test_criterion_08_full_apb(desk_runs):
    _, report, _ = desk_runs
    dq = report.cell(5, "full", "dq@r7-n200")
    qmc = report.cell(5, "full", "halton@200")
    a, b = _by_resample(dq, "apb"), _by_resample(qmc, "apb")
    wins = sum(a[k] <= b[k] for k in a if k in b)
    ok = dq.mean_apb <= qmc.mean_apb and wins >= 7
    record(8, "full d=5 APB trend", ok,
           f"mean APB DQ r7 {dq.mean_apb:.2f} vs Halton@200 {qmc.mean_apb:.2f}; DQ <= Halton on {wins}/10")


def test_criterion_09_apb_monotone(desk_runs):
    _, report, _ = desk_runs
    lines, ok = [], True
    for cov in ("diagonal", "full"):
        for name, grid in (("halton", HALTON_GRID), ("dq", DQ_GRID)):
            apbs = [report.cell(5, cov, m).mean_apb for m in grid]
            inversions = sum(b > a for a, b in zip(apbs, apbs[1:]))
            ok &= inversions <= 1
            lines.append(f"{cov}/{name} " + " -> ".join(f"{v:.2f}" for v in apbs) + f" ({inversions} inversions)")
    record(9, "APB non-increasing over the grid", ok, "; ".join(lines))


def test_criterion_10_determinism(desk_runs):
    (a, b), _, _ = desk_runs
    same_csv = (a / "report.csv").read_bytes() == (b / "report.csv").read_bytes()
    same_json = (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    record(10, "byte-identical study reports", same_csv and same_json,
           f"report.csv identical: {same_csv}; report.json identical: {same_json}")


@pytest.mark.skipif(not os.environ.get("DQMIX_STRETCH"), reason="stretch target; set DQMIX_STRETCH=1 to attempt")
def test_stretch_d10_r5_n148():
    try:
        rule = generate_dq("normal", 10, 5, 148, seed=0)
        RESULTS[2.5] = (True, "stretch d=10 r=5 n=148", f"residual {rule.residual:.1e}")
    except InfeasibleRuleError as exc:
        RESULTS[2.5] = (False, "stretch d=10 r=5 n=148 (non-blocking)", f"best residual {exc.best_residual:.1e}")
        pytest.xfail("stretch target not reached")

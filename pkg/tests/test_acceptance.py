"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines as they are
produced; they are also repeated in the terminal summary. Criterion 9 runs
twenty full private bilevel solves and takes about a quarter of an hour.
"""
import math
import time
import warnings

import numpy as np
import pytest

from dpbilevel import Dataset, PrivacyBudget, RunConfig, oracles, streams
from dpbilevel.config import FAMILY_DEFAULTS, _coupling
from dpbilevel.experiments import proposition_check, scaling_sweep
from dpbilevel.outer import OuterWarning, assign_outer_params, estimate_hypergradient, run_dp_bilevel
from dpbilevel.privacy import add_gaussian_noise, advanced_composition, amplify_by_subsampling, calibrate_gaussian
from dpbilevel.problems import (TuningConfig, grid_search_omega, make_mean_leak, make_quadratic, make_reg_tuning,
                                make_ridge_data, run_private_reg_tuning)
from dpbilevel.verify import nonexpansive_violations

from conftest import ACCEPTANCE_LINES


def report(number: int, title: str, passed: bool, detail: str, elapsed: float, limit: float):
    ok = passed and elapsed < limit
    line = f"CRITERION {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail} [{elapsed:.2f}s < {limit:g}s]"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line
    assert elapsed < limit, line


def _quadratic(d: int, n: int, A_norm: float, seed: int = 0):
    A = np.random.default_rng(seed).standard_normal((d, d))
    return make_quadratic(A * A_norm / np.linalg.norm(A, 2), n=n, seed=seed)


def test_criterion_01_leak_reproduction():
    t0 = time.perf_counter()
    ds = Dataset([[1.0, 0.0], [3.0, 0.0]])
    grad = oracles.exact_hypergradient(make_mean_leak(ds), ds, np.zeros(2))
    err = float(np.max(np.abs(grad - np.array([2.0, 0.0]))))
    report(1, "leak reproduction", err <= 1e-12, f"grad F(0) = {grad.tolist()}, |err| = {err:.2g}",
           time.perf_counter() - t0, 1.0)


def test_criterion_02_privacy_arithmetic():
    t0 = time.perf_counter()
    # hand evaluations of the closed forms
    expected = {
        "gaussian(1, 0.5, 1e-5)": (calibrate_gaussian(1.0, 0.5, 1e-5), 8.0 * math.log(1.25e5)),
        "gaussian(1, 0.9, 0.05)": (calibrate_gaussian(1.0, 0.9, 0.05), (2.0 / 0.81) * math.log(25.0)),
        "advanced(0.01, 1e-6, 100).eps": (advanced_composition(0.01, 1e-6, 100).epsilon,
                                          math.sqrt(200.0 * math.log(1e6)) * 0.01 + 0.02),
        "advanced(0.01, 1e-6, 100).delta": (advanced_composition(0.01, 1e-6, 100).delta, 1.01e-4),
        "amplified(0.5, 10, 1000)": (amplify_by_subsampling(0.5, 1e-6, 10, 1000).epsilon,
                                     math.log(1.0 + 0.009955119790251765 * math.expm1(0.5))),
    }
    worst = max(abs(a - b) / abs(b) for a, b in expected.values())

    p, ds = _quadratic(2, 20_000, 0.5)
    budget = PrivacyBudget(1.0, 1e-5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OuterWarning)
        params = assign_outer_params(p.constants, None, budget, ds.n, 2, 2, overrides={"T": 4})
    rep = run_dp_bilevel(p, ds, np.zeros(2), RunConfig(seed=0), params, budget, inner_overrides={"T_cap": 30})
    T = params.T
    eps_i, delta_i = params.eps_working / math.sqrt(18 * T), params.delta_working / (3 * (T + 1))
    decomposition_err = 0.0
    for r, spend in rep.ledger.round_spends().items():
        entries = [e for e in rep.ledger.entries if e.round == r]
        assert sorted(e.label for e in entries) == ["inner_g", "inner_penalty", "outer_noise"]
        decomposition_err = max(decomposition_err,
                                abs(spend.epsilon - params.eps_working / math.sqrt(2 * T)) / spend.epsilon,
                                abs(spend.delta - params.delta_working / (T + 1)) / spend.delta)
    parts_err = max(abs(params.eps_inner - eps_i) / eps_i, abs(params.delta_inner - delta_i) / delta_i)
    ok = worst <= 1e-9 and decomposition_err <= 1e-9 and parts_err <= 1e-12 and rep.ledger.total.within(budget)
    report(2, "privacy arithmetic", ok,
           f"closed forms rel err {worst:.2g}, round decomposition rel err {decomposition_err:.2g}",
           time.perf_counter() - t0, 1.0)


def test_criterion_03_gaussian_variance():
    t0 = time.perf_counter()
    sigma2 = calibrate_gaussian(1.0, 0.5, 1e-5)
    draws = add_gaussian_noise(np.zeros(1_000_000), sigma2, streams.stream(0, streams.MISC, 3))
    rel = abs(float(np.var(draws)) / sigma2 - 1.0)
    report(3, "gaussian calibration", rel <= 0.02, f"sigma2 {sigma2:.6g}, empirical rel dev {rel:.3g}",
           time.perf_counter() - t0, 10.0)


def test_criterion_04_nonexpansive_gradient_mapping():
    t0 = time.perf_counter()
    bad = nonexpansive_violations(10_000, seed=0, tol=1e-12)
    report(4, "gradient mapping non-expansive", bad == 0, f"{bad} violations in 10000 tuples (5 set variants)",
           time.perf_counter() - t0, 30.0)


def test_criterion_05_penalty_approximation():
    t0 = time.perf_counter()
    p, ds = _quadratic(4, 500, 0.7, seed=2)
    lambdas = np.logspace(1, 4, 7)
    rng = np.random.default_rng(5)
    slopes, excess = [], -math.inf
    for _ in range(10):
        x = oracles.sample_in_set(p.feasible_x, rng)
        recs = oracles.diagnostics_sweep(p, ds, x, lambdas)
        slopes.append(oracles.loglog_slope(lambdas, [r.gradient_gap for r in recs]))
        excess = max(excess, max(r.distance - r.bound for r in recs))
    ok = all(abs(s + 1.0) <= 0.1 for s in slopes) and excess <= 1e-10
    report(5, "penalty approximation", ok,
           f"slopes in [{min(slopes):.4f}, {max(slopes):.4f}], max(|y_lam - y*| - L0f/(lam mu)) = {excess:.3g}",
           time.perf_counter() - t0, 60.0)


def test_criterion_06_lambda_independent_sensitivity():
    t0 = time.perf_counter()
    p, ds = _quadratic(10, 2000, 0.5)
    _, fresh = _quadratic(10, 200, 0.5, seed=1)
    c = p.constants
    rng = np.random.default_rng(0)
    xs = [oracles.sample_in_set(p.feasible_x, rng) for _ in range(5)]
    lambdas = np.logspace(1, 3, 9)
    sens = []
    for lam in lambdas:
        # a swap changes the mean by at most 2 max_i ||row_i|| / n
        sens.append(max(2.0 * float(np.linalg.norm(oracles.penalty_rows(p, ds, x, lam), axis=1).max()) / ds.n
                        for x in xs))
    ratio = max(sens) / min(sens)
    trend = oracles.loglog_slope(lambdas, sens)
    worst = 0.0
    for x in xs:
        y = oracles.solve_inner_exact(p, ds, x, "g")
        for lam in (10.0, 100.0, 1000.0):
            y_l = oracles.solve_inner_exact(p, ds, x, "f_plus_lambda_g", lam, y0=y)
            base = estimate_hypergradient(p, x, y, y_l, lam, ds)
            for _ in range(20):
                swapped = ds.replace(int(rng.integers(ds.n)), fresh.points[int(rng.integers(fresh.n))])
                worst = max(worst, float(np.linalg.norm(estimate_hypergradient(p, x, y, y_l, lam, swapped) - base)))
    bound = 2 * 5.0 * c.ell * c.kappa / ds.n
    ok = ratio < 2.0 and worst <= bound
    report(6, "lambda-independent sensitivity", ok,
           f"sensitivity ratio over 100x lambda {ratio:.4f} (log-log trend {trend:.3g}), "
           f"max swap change {worst:.3g} <= {bound:.3g}", time.perf_counter() - t0, 60.0)


def test_criterion_07_inner_solver_scaling():
    t0 = time.perf_counter()
    ns = [2**k for k in range(10, 15)]
    rows = scaling_sweep(ns, seeds=20, d=10, eps_prime=1.0, delta_prime=1e-2, overrides={"T_cap": 4})
    slope = oracles.loglog_slope(ns, [r.median_error for r in rows])
    ball = max(r.max_ball_ratio for r in rows)
    ok = abs(slope + 1.0) <= 0.15 and ball <= 1.0 + 1e-12
    medians = ", ".join(f"{r.n}: {r.median_error:.3g}" for r in rows)
    report(7, "inner solver scaling", ok, f"slope {slope:.4f}, max ball ratio {ball:.4f}, medians {medians}",
           time.perf_counter() - t0, 600.0)


def test_criterion_08_outer_robustness():
    t0 = time.perf_counter()
    runs, settings = proposition_check(alpha=0.5, seeds=20, dim=20, gamma=0.1)
    passed = sum(r.passed for r in runs)
    worst = max(r.grad_mapping_norm for r in runs)
    report(8, "noisy biased prox descent", passed >= 19,
           f"{passed}/20 runs with ||G|| <= 0.5 (worst {worst:.3g}) at T = {settings['T']}",
           time.perf_counter() - t0, 120.0)


@pytest.mark.slow
def test_criterion_09_end_to_end_private_bilevel():
    t0 = time.perf_counter()
    p, ds = make_quadratic(_coupling({**FAMILY_DEFAULTS["quadratic"], "d_x": 10, "d_y": 10}), n=50_000, seed=0)
    budget = PrivacyBudget(2.0, 1e-6)
    params = assign_outer_params(p.constants, None, budget, ds.n, 10, 10)
    hits, over_budget, norms = 0, 0, []
    for seed in range(20):
        rep = run_dp_bilevel(p, ds, np.zeros(10), RunConfig(seed=seed), params, budget,
                             inner_overrides={"T_cap": 10_000})
        grad = p.references["hypergradient"](rep.x_out)
        gm = float(np.linalg.norm(p.feasible_x.gradient_mapping(rep.x_out, grad, params.eta)))
        norms.append(gm)
        hits += gm <= params.alpha
        t = rep.ledger.total
        over_budget += not (t.epsilon <= 2.0 and t.delta <= 1e-6)
    # the largest gradient mapping anywhere in the feasible ball, for context on alpha
    rng = np.random.default_rng(0)
    sup = max(float(np.linalg.norm(p.feasible_x.gradient_mapping(x, p.references["hypergradient"](x), params.eta)))
              for x in [oracles.sample_in_set(p.feasible_x, rng) for _ in range(2000)])
    ok = hits >= 18 and over_budget == 0
    report(9, "end-to-end private bilevel", ok,
           f"{hits}/20 runs with ||G_F|| <= alpha = {params.alpha:.4g} (median {np.median(norms):.3g}, "
           f"max {max(norms):.3g}), {over_budget} runs over budget, lambda {params.lam:.4g}, T {params.T}; "
           f"note sup ||G_F|| over the ball ~ {sup:.3g}", time.perf_counter() - t0, 1800.0)


def test_criterion_10_regularization_tuning():
    t0 = time.perf_counter()
    data = make_ridge_data(4_000_000, p=1, val_fraction=0.75, features="sign", seed=0)
    prob = make_reg_tuning(data, theta_radius=1.5, feature_bound=1.0, label_bound=1.3)
    w_star = grid_search_omega(prob)
    base = dict(lam=4.0, eta=2.0, T=30, clip=2.0)
    clean = run_private_reg_tuning(prob, data, TuningConfig(**base, noiseless=True,
                                                            inner_overrides={"T_cap": 2000, "C_R": 100.0}))
    clean_err = abs(clean.omega_out - w_star) / w_star
    ref = np.array(clean.omegas[1:])
    devs, nonneg = [], min(clean.omegas) >= 0
    budget = PrivacyBudget(1000.0, 1e-6)
    for seed in range(5):
        rep = run_private_reg_tuning(prob, data, TuningConfig(**base, budget=budget, seed=seed,
                                                              inner_overrides={"T_cap": 2000}))
        devs.append(float(np.median(np.abs(np.array(rep.omegas[1:]) - ref) / np.abs(ref))))
        nonneg = nonneg and min(rep.omegas) >= 0 and rep.ledger.total.within(budget)
    ok = clean_err <= 0.1 and max(devs) <= 0.05 and nonneg
    report(10, "regularization tuning", ok,
           f"omega* {w_star:.5g}, zero-noise omega_out {clean.omega_out:.5g} (rel err {clean_err:.2g}), "
           f"private median deviations {', '.join(f'{d:.3g}' for d in devs)}, omega >= 0: {nonneg}",
           time.perf_counter() - t0, 300.0)


def test_criterion_11_gradient_correctness():
    t0 = time.perf_counter()
    qp, qd = _quadratic(3, 200, 0.7)
    leak_ds = Dataset(np.random.default_rng(1).standard_normal((20, 3)))
    ridge_ds = make_ridge_data(200, p=3, seed=0)
    probs = {
        "quadratic": (qp, qd),
        "mean_leak(sum)": (make_mean_leak(leak_ds), leak_ds),
        "mean_leak(mean)": (make_mean_leak(leak_ds, lower_scale="mean"), leak_ds),
        "reg_tuning(ridge)": (make_reg_tuning(ridge_ds, theta_radius=2.0, feature_bound=3.0, label_bound=5.0),
                              ridge_ds),
        "reg_tuning(norm)": (make_reg_tuning(ridge_ds, "norm", theta_radius=2.0, eps_reg=0.1, feature_bound=3.0,
                                             label_bound=5.0), ridge_ds),
    }
    worst = {name: max(oracles.gradient_check(p, 100, 0, d).values()) for name, (p, d) in probs.items()}
    report(11, "gradient correctness", max(worst.values()) <= 1e-5,
           ", ".join(f"{k} {v:.2g}" for k, v in worst.items()), time.perf_counter() - t0, 60.0)

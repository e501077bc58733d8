"""Invariant battery behind ``dpbilevel verify``.

Each check returns a named pass/fail line. The battery covers the privacy
arithmetic, the geometry operators, the inner and outer solvers, the
verification oracles and the built-in problems.
"""
from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import oracles, streams
from .core import Dataset, PrivacyBudget, RunConfig
from .geometry import ConvexSet
from .inner import InnerObjective, derive_inner_params, dp_loc_sgd
from .outer import assign_outer_params, estimate_hypergradient, run_dp_bilevel
from .privacy import (PrivacyLedger, add_gaussian_noise, advanced_composition, amplify_by_subsampling,
                      calibrate_gaussian, split_outer_budget)
from .problems import (TuningConfig, make_mean_leak, make_quadratic, make_reg_tuning, make_ridge_data,
                       run_private_reg_tuning, tuning_params)


@dataclass(frozen=True)
class CheckResult:
    module: str
    name: str
    passed: bool
    detail: str


def format_table(results) -> str:
    w = max(len(f"{r.module}.{r.name}") for r in results)
    lines = [f"{'check':<{w}}  result  detail", "-" * (w + 30)]
    for r in results:
        lines.append(f"{r.module + '.' + r.name:<{w}}  {'PASS' if r.passed else 'FAIL':<6}  {r.detail}")
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} passed")
    return "\n".join(lines)


def random_set(rng, dim: int) -> ConvexSet:
    kind = rng.integers(5)
    if kind == 0:
        return ConvexSet.whole_space(dim)
    if kind == 1:
        return ConvexSet.ball(rng.standard_normal(dim), 0.1 + 2 * rng.random())
    if kind == 2:
        lo = rng.standard_normal(dim)
        return ConvexSet.box(lo, lo + 2 * rng.random(dim))
    if kind == 3:
        return ConvexSet.nonneg_orthant(dim)
    return ConvexSet.simplex(dim, 0.1 + 2 * rng.random())


def nonexpansive_violations(num: int, seed: int = 0, tol: float = 1e-12) -> int:
    """Count tuples with ``||G_v(x) - G_w(x)|| > ||v - w|| + tol`` over random sets."""
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(num):
        dim = int(rng.integers(1, 8))
        s = random_set(rng, dim)
        x = s.project(3 * rng.standard_normal(dim))
        v, w = 3 * rng.standard_normal(dim), 3 * rng.standard_normal(dim)
        eta = 10 ** rng.uniform(-2, 1)
        gap = np.linalg.norm(s.gradient_mapping(x, v, eta) - s.gradient_mapping(x, w, eta))
        bad += gap > np.linalg.norm(v - w) + tol
    return int(bad)


def _quadratic(seed: int, d_x: int = 3, d_y: int = 4, n: int = 200, A_norm: float = 0.7):
    A = np.random.default_rng(seed).standard_normal((d_y, d_x))
    return make_quadratic(A * A_norm / np.linalg.norm(A, 2), n=n, seed=seed)


def _scaled(problem, scales: dict):
    if not scales:
        return problem
    c = problem.constants
    bad = set(scales) - set(dataclasses.asdict(c))
    if bad:
        raise ValueError(f"unknown constants to scale: {sorted(bad)}")
    new = {k: getattr(c, k) * f for k, f in scales.items()}
    return dataclasses.replace(problem, constants=dataclasses.replace(c, **new))


def verify_suite(seed: int = 0, constant_scales: Optional[dict] = None, quick: bool = False) -> list[CheckResult]:
    out: list[CheckResult] = []
    k = 0.2 if quick else 1.0

    def check(module: str, name: str, fn: Callable[[], tuple[bool, str]]):
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                ok, detail = fn()
        except Exception as exc:  # a crash is a failure of that check only
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append(CheckResult(module, name, bool(ok), detail))

    rng = np.random.default_rng(seed)
    qp, qd = _quadratic(seed)
    qp = _scaled(qp, constant_scales or {})

    # privacy
    def gaussian_variance():
        s2 = calibrate_gaussian(1.0, 0.5, 1e-5)
        draws = add_gaussian_noise(np.zeros(int(200_000 * k)), s2, streams.stream(seed, streams.MISC))
        rel = abs(draws.var() / s2 - 1)
        return rel <= 0.02, f"relative variance error {rel:.4f}"

    def composition_monotone():
        a = advanced_composition(0.01, 1e-7, 100)
        b = advanced_composition(0.01, 1e-7, 200)
        c = amplify_by_subsampling(0.5, 1e-6, 10, 1000)
        return (b.epsilon > a.epsilon and c.epsilon < 0.5), f"eps(100)={a.epsilon:.4g} amp={c.epsilon:.4g}"

    def ledger_split():
        T = 50
        e, d = split_outer_budget(PrivacyBudget(2.0, 1e-6), T)
        led = PrivacyLedger(hard_budget=PrivacyBudget(2.0, 1e-6))
        for t in range(T):
            for lab in ("inner_g", "inner_penalty", "outer_noise"):
                led.record(lab, e, d, "basic", round=t)
        r = led.round_spends()[0]
        ok = math.isclose(r.epsilon, 3 * e, rel_tol=1e-12) and math.isclose(r.delta, 3 * d, rel_tol=1e-12)
        tot = led.total
        return ok and tot.epsilon <= 2.0 and tot.delta <= 1e-6, f"total ({tot.epsilon:.6g}, {tot.delta:.3g})"

    check("privacy", "gaussian_variance", gaussian_variance)
    check("privacy", "composition_monotone", composition_monotone)
    check("privacy", "ledger_decomposition", ledger_split)

    # geometry
    def nonexp():
        bad = nonexpansive_violations(int(10_000 * k), seed)
        return bad == 0, f"{bad} violations"

    def idempotent_lipschitz():
        worst_i, worst_l = 0.0, 0.0
        for _ in range(int(2000 * k)):
            dim = int(rng.integers(1, 6))
            s = random_set(rng, dim)
            z1, z2 = 3 * rng.standard_normal(dim), 3 * rng.standard_normal(dim)
            p1, p2 = s.project(z1), s.project(z2)
            worst_i = max(worst_i, float(np.linalg.norm(s.project(p1) - p1)))
            worst_l = max(worst_l, float(np.linalg.norm(p1 - p2) - np.linalg.norm(z1 - z2)))
        return worst_i <= 1e-12 and worst_l <= 1e-12, f"idempotence {worst_i:.2g}, expansion {worst_l:.2g}"

    def prox_optimality():
        worst = 0.0
        for _ in range(int(2000 * k)):
            dim = int(rng.integers(1, 6))
            s = random_set(rng, dim)
            x = s.project(rng.standard_normal(dim))
            v, eta = rng.standard_normal(dim), 10 ** rng.uniform(-2, 1)
            u_star = s.prox_step(x, v, eta)
            u = s.project(3 * rng.standard_normal(dim))
            worst = min(worst, float((v + (u_star - x) / eta) @ (u - u_star)))
        return worst >= -1e-10, f"min inner product {worst:.3g}"

    check("geometry", "nonexpansive_gradient_mapping", nonexp)
    check("geometry", "projection_idempotent_1lipschitz", idempotent_lipschitz)
    check("geometry", "prox_first_order_optimality", prox_optimality)

    # inner solver
    def inner_ball_and_spend():
        d, n = 5, 500
        c = rng.standard_normal((n, d))
        c /= np.maximum(1, np.linalg.norm(c, axis=1, keepdims=True))
        obj = InnerObjective.affine(np.eye(d), c)
        p = derive_inner_params(1.0, 3.0, n, d, 1.0, 1e-3, None, 1.0, {"T_cap": 200})
        led = PrivacyLedger()
        res = dp_loc_sgd(obj, np.zeros(d), p, streams.stream(seed, streams.MISC, 1), ledger=led)
        t = led.total
        ok = res.max_ball_ratio <= 1 + 1e-12 and t.epsilon <= 1.0 * (1 + 1e-9) and t.delta <= 1e-3 * (1 + 1e-9)
        return ok, f"ball ratio {res.max_ball_ratio:.6f}, spend ({t.epsilon:.6g}, {t.delta:.3g})"

    check("inner_solver", "ball_and_spend", inner_ball_and_spend)

    # outer solver
    def outer_feasible_and_budget():
        budget = PrivacyBudget(1.0, 1e-6)
        bp, bd = _quadratic(seed, n=5000)
        params = assign_outer_params(bp.constants, None, budget, bd.n, bp.dim_x, bp.dim_y, overrides={"T": 5})
        rep = run_dp_bilevel(bp, bd, np.zeros(bp.dim_x), RunConfig(seed=seed), params, budget,
                             inner_overrides={"T_cap": 200})
        inside = all(bp.feasible_x.contains(x) for x in rep.iterates)
        t = rep.ledger.total
        return inside and t.within(budget), f"iterates feasible={inside}, spend ({t.epsilon:.6g}, {t.delta:.3g})"

    def swap_sensitivity():
        c = qp.constants
        worst = 0.0
        for _ in range(int(20 * k) + 1):
            x = oracles.sample_in_set(qp.feasible_x, rng)
            lam = 10 ** rng.uniform(1, 3)
            y = oracles.solve_inner_exact(qp, qd, x, "g")
            y_l = oracles.solve_inner_exact(qp, qd, x, "f_plus_lambda_g", lam, y0=y)
            i = int(rng.integers(qd.n))
            other = qd.replace(i, qd.points[int(rng.integers(qd.n))])
            a = estimate_hypergradient(qp, x, y, y_l, lam, qd)
            b = estimate_hypergradient(qp, x, y, y_l, lam, other)
            worst = max(worst, float(np.linalg.norm(a - b)))
        bound = 2 * 5.0 * c.ell * c.kappa / qd.n
        return worst <= bound, f"max change {worst:.3g} <= {bound:.3g}"

    check("outer_solver", "feasible_iterates_and_budget", outer_feasible_and_budget)
    check("outer_solver", "estimator_swap_sensitivity", swap_sensitivity)

    # oracles
    def hypergradient_fd():
        worst = 0.0
        for _ in range(3):
            x = oracles.sample_in_set(qp.feasible_x, rng)
            worst = max(worst, oracles.relative_error(oracles.exact_hypergradient(qp, qd, x),
                                                      oracles.finite_difference_hypergradient(qp, qd, x)))
        return worst <= 1e-5, f"relative error {worst:.3g}"

    def ylambda_close():
        c = qp.constants
        worst = -math.inf
        for _ in range(5):
            x = oracles.sample_in_set(qp.feasible_x, rng)
            for lam in (10.0, 100.0, 1000.0):
                y = oracles.solve_inner_exact(qp, qd, x, "g")
                y_l = oracles.solve_inner_exact(qp, qd, x, "f_plus_lambda_g", lam)
                worst = max(worst, float(np.linalg.norm(y_l - y)) - c.L0f / (lam * c.mu_g))
        return worst <= 1e-10, f"max excess {worst:.3g}"

    def ylambda_lip():
        c = qp.constants
        lam = max(10.0, 2 * c.L1f / c.mu_g)
        r = oracles.ylambda_lipschitz_check(qp, qd, lam, int(50 * k) + 5, seed)
        return r <= 4 * c.L1g / c.mu_g, f"ratio {r:.4g} <= {4 * c.L1g / c.mu_g:.4g}"

    def certify():
        certs = oracles.certify_constants(qp, qd, int(5000 * k), seed)
        bad = [f"{ct.name} (declared {ct.declared:.4g}, observed {ct.observed:.4g})" for ct in certs if not ct.ok]
        return not bad, "all constants certified" if not bad else "violated: " + ", ".join(bad)

    check("oracles", "hypergradient_vs_finite_differences", hypergradient_fd)
    check("oracles", "ylambda_distance_bound", ylambda_close)
    check("oracles", "ylambda_lipschitz", ylambda_lip)
    check("oracles", "lipschitz_certification", certify)

    # problems
    def leak():
        ds = Dataset(np.array([[1.0, 0.0], [3.0, 0.0]]))
        g = oracles.exact_hypergradient(make_mean_leak(ds), ds, np.zeros(2))
        err = float(np.max(np.abs(g - np.array([2.0, 0.0]))))
        return err <= 1e-12, f"|grad F(0) - mean| = {err:.3g}"

    def quadratic_closed_form():
        x = oracles.sample_in_set(qp.feasible_x, rng)
        y_l = oracles.solve_inner_exact(qp, qd, x, "f_plus_lambda_g", 50.0)
        err = float(np.linalg.norm(y_l - qp.references["y_lambda"](x, 50.0)))
        return err <= 1e-8, f"closed-form y_lambda error {err:.3g}"

    def gradients():
        ds = make_ridge_data(200, p=3, seed=seed)
        leak_ds = Dataset(rng.standard_normal((20, 3)))
        probs = [(qp, qd), (make_mean_leak(leak_ds), leak_ds),
                 (make_reg_tuning(ds, theta_radius=2.0), ds),
                 (make_reg_tuning(ds, "norm", theta_radius=2.0, eps_reg=0.1), ds)]
        worst = {}
        for p, d in probs:
            res = oracles.gradient_check(p, int(100 * k) + 5, seed, d)
            worst[p.name] = max(res.values())
        return max(worst.values()) <= 1e-5, ", ".join(f"{a}: {b:.2g}" for a, b in worst.items())

    def tuning_paths_agree():
        ds = make_ridge_data(400, p=1, val_fraction=0.75, seed=seed, features="sign")
        prob = make_reg_tuning(ds, theta_radius=1.5)
        cfg = TuningConfig(lam=4.0, eta=0.5, T=4, budget=PrivacyBudget(50.0, 1e-5), seed=seed,
                           inner_overrides={"T_cap": 100})
        rep = run_private_reg_tuning(prob, ds, cfg)
        params = tuning_params(prob, ds.n, cfg)
        gen = run_dp_bilevel(prob, ds, np.zeros(1), RunConfig(seed=seed), params,
                             inner_overrides={"T_cap": 100})
        diff = float(np.max(np.abs(np.array(rep.omegas) - gen.iterates[:, 0])))
        return diff <= 1e-12 and min(rep.omegas) >= 0, f"max path difference {diff:.3g}"

    check("problems", "mean_leak_reproduction", leak)
    check("problems", "quadratic_closed_form", quadratic_closed_form)
    check("problems", "gradient_oracles", gradients)
    check("problems", "reg_tuning_matches_generic_loop", tuning_paths_agree)
    return out

import dataclasses
import json
import math
import warnings

import numpy as np
import pytest

from dpbilevel import Dataset, PrivacyBudget, ProblemConstants, RunConfig, streams
from dpbilevel.core import PreconditionError
from dpbilevel.geometry import ConvexSet
from dpbilevel.outer import (OuterWarning, alpha_bound, assign_outer_params, estimate_hypergradient,
                             noisy_prox_descent, run_dp_bilevel, select_output)
from dpbilevel.problems import make_mean_leak, make_quadratic

UNIT = ProblemConstants(L0f=1.0, L1f=1.0, L0g=1.0, L1g=1.0, L2g=0.0, mu_g=1.0, Delta_F=1.0)
A32 = np.array([[0.3, -0.2], [0.1, 0.4], [0.0, 0.5]])


def _assign(*args, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OuterWarning)
        return assign_outer_params(*args, **kw)


def _exact_solver(problem):
    ref = problem.references
    return lambda which, x, lam: ref["y_star"](x) if which == "g" else ref["y_lambda"](x, lam)


def test_assignment_example_unit_constants():
    p = _assign(UNIT, 0.1, PrivacyBudget(1.0, 1e-6), 1000, 2, 2)
    assert p.lam == pytest.approx(10.0, rel=1e-12)
    assert p.T == 100
    assert p.eta == pytest.approx(0.5, rel=1e-12) and p.eta <= 1 / (2 * p.L_smooth)


def test_sigma2_scales_inverse_square_in_n():
    b = PrivacyBudget(1.0, 1e-6)
    a = _assign(UNIT, 0.1, b, 1000, 2, 2)
    c = _assign(UNIT, 0.1, b, 2000, 2, 2)
    assert c.T == a.T and c.sigma2 == pytest.approx(a.sigma2 / 4, rel=1e-12)


def test_alpha_boundary():
    bound, name = alpha_bound(UNIT)
    assert name == "1/(2 kappa)"
    _assign(UNIT, bound, PrivacyBudget(1.0, 1e-6), 1000, 2, 2)
    with pytest.raises(PreconditionError, match="1/\\(2 kappa\\)"):
        _assign(UNIT, bound * (1 + 1e-9), PrivacyBudget(1.0, 1e-6), 1000, 2, 2)


def test_lambda_raised_to_validity_floor():
    c = dataclasses.replace(UNIT, L1g=3.0)
    with pytest.warns(OuterWarning, match="validity floor"):
        p = assign_outer_params(c, 0.4, PrivacyBudget(1.0, 1e-6), 1000, 2, 2, overrides={"C_lambda": 1e-3})
    assert p.lam == pytest.approx(6.0)


def test_explicit_overrides_recorded():
    with pytest.warns(OuterWarning, match="explicit"):
        p = assign_outer_params(UNIT, 0.1, PrivacyBudget(1.0, 1e-6), 1000, 2, 2, overrides={"T": 7, "sigma2": 0.0})
    assert p.T == 7 and p.sigma2 == 0.0 and any("not private" in s for s in p.notes)
    with pytest.raises(ValueError, match="unknown"):
        assign_outer_params(UNIT, 0.1, PrivacyBudget(1.0, 1e-6), 1000, 2, 2, overrides={"C_q": 1})


def test_select_output_examples():
    assert select_output([0.5, 0.1, 0.3]) == 1
    assert select_output([0.2, 0.2]) == 0
    assert select_output([0.7] * 5) == 0
    with pytest.raises(ValueError):
        select_output([])


def test_estimator_on_mean_leak_is_x_plus_y_lambda():
    ds = Dataset([[1.0, 0.0], [3.0, 0.0]])
    p = make_mean_leak(ds, R_x=5.0)
    x, y, yl = np.array([0.5, -1.0]), np.array([2.0, 0.0]), np.array([1.9, 0.1])
    assert np.allclose(estimate_hypergradient(p, x, y, yl, 50.0, ds), x + yl, rtol=0, atol=1e-14)


def test_estimator_equal_points_reduces_to_grad_x_f():
    p, ds = make_quadratic(A32, n=50, seed=0)
    x, y = np.array([0.1, 0.2]), np.array([0.3, -0.1, 0.2])
    ref = p.per_sample_gradients("xf", x, y, ds.points).mean(axis=0)
    assert np.allclose(estimate_hypergradient(p, x, y, y, 1e3, ds), ref, rtol=0, atol=1e-14)


def test_estimator_at_exact_points_is_penalty_gradient():
    p, ds = make_quadratic(A32, n=80, seed=2)
    ref = p.references
    rng = np.random.default_rng(0)
    for lam in (3.0, 30.0, 300.0):
        x = rng.uniform(-0.5, 0.5, 2)
        est = estimate_hypergradient(p, x, ref["y_star"](x), ref["y_lambda"](x, lam), lam, ds)
        assert np.allclose(est, ref["penalty_gradient"](x, lam), rtol=0, atol=1e-8)


def test_estimator_swap_sensitivity():
    p, ds = make_quadratic(A32, n=200, seed=4)
    c = p.constants
    rng = np.random.default_rng(1)
    ref = p.references
    for lam in (10.0, 100.0, 1000.0):
        x = rng.uniform(-0.5, 0.5, 2)
        y, yl = ref["y_star"](x), ref["y_lambda"](x, lam)
        i = int(rng.integers(ds.n))
        new = np.concatenate([rng.uniform(-0.5, 0.5, 2) * 0.5, rng.uniform(-0.5, 0.5, 6) * 0.5])
        nb = ds.replace(i, new)
        diff = np.linalg.norm(estimate_hypergradient(p, x, y, yl, lam, ds) - estimate_hypergradient(p, x, y, yl, lam, nb))
        assert diff <= 2 * 5.0 * c.ell * c.kappa / ds.n
        diff_c = np.linalg.norm(estimate_hypergradient(p, x, y, yl, lam, ds, clip=0.1)
                                - estimate_hypergradient(p, x, y, yl, lam, nb, clip=0.1))
        assert diff_c <= 2 * 0.1 / ds.n + 1e-15


def test_prox_descent_noiseless_rate():
    H = np.diag([1.0, 2.0, 4.0])
    L = 4.0
    x0 = np.array([3.0, -2.0, 1.0])
    h0 = 0.5 * x0 @ H @ x0
    feasible = ConvexSet.whole_space(3)
    for T in (1, 10, 100):
        run = noisy_prox_descent(lambda x, t: H @ x, feasible, x0, 1 / (2 * L), 0.0, T, streams.stream(0))
        gm = np.linalg.norm(feasible.gradient_mapping(run.x_out, H @ run.x_out, 1 / (2 * L)))
        assert gm <= math.sqrt(12 * L * h0 / T)


def test_prox_descent_single_step():
    feasible = ConvexSet.ball(np.zeros(2), 1.0)
    run = noisy_prox_descent(lambda x, t: np.array([-3.0, 0.0]), feasible, np.zeros(2), 0.5, 0.0, 1, streams.stream(0))
    assert run.t_out == 0 and np.allclose(run.x_out, [0.0, 0.0])
    assert np.allclose(run.iterates[1], [1.0, 0.0])
    with pytest.raises(ValueError):
        noisy_prox_descent(lambda x, t: x, feasible, np.zeros(2), 0.5, 0.0, 0, streams.stream(0))


def test_prox_descent_adversarial_bias_small_scale():
    feasible = ConvexSet.box(-3 * np.ones(5), 3 * np.ones(5))
    alpha, L = 0.5, 2.6

    def grad(x):
        return x - 0.8 * np.sin(2 * x)

    def oracle(x, t):
        g = grad(x)
        return g - (alpha / 8) * g / max(np.linalg.norm(g), 1e-300)

    x0 = np.full(5, 2.5)
    T = 2000
    ok = 0
    for s in range(10):
        run = noisy_prox_descent(oracle, feasible, x0, 1 / (2 * L), (alpha / 8) ** 2 / (5 * math.log(T / 0.1)), T,
                                 streams.stream(s))
        ok += np.linalg.norm(feasible.gradient_mapping(run.x_out, grad(run.x_out), 1 / (2 * L))) <= alpha
        assert all(feasible.contains(x) for x in run.iterates)
    assert ok >= 9


def test_deterministic_whole_space_run_is_penalty_descent():
    p, ds = make_quadratic(A32, n=500, seed=1)
    pw = dataclasses.replace(p, feasible_x=ConvexSet.whole_space(2))
    params = _assign(p.constants, 0.05, PrivacyBudget(1.0, 1e-6), ds.n, 2, 3,
                     overrides={"sigma2": 0.0, "lambda": 100.0, "T": 200, "eta": 0.5})
    rep = run_dp_bilevel(pw, ds, np.array([0.9, -0.9]), RunConfig(seed=0), params, inner_solver=_exact_solver(p))
    norms = [np.linalg.norm(p.references["penalty_gradient"](x, params.lam)) for x in rep.iterates]
    assert all(b <= a + 1e-15 for a, b in zip(norms, norms[1:]))
    assert norms[-1] <= 0.05
    x1 = rep.iterates[0] - 0.5 * p.references["penalty_gradient"](rep.iterates[0], params.lam)
    assert np.allclose(rep.iterates[1], x1, rtol=0, atol=1e-12)
    assert len(rep.ledger.entries) == params.T  # only the outer noise entries


def test_single_iteration_ledger_structure():
    p, ds = make_quadratic(A32, n=20_000, seed=0)
    budget = PrivacyBudget(1.0, 1e-5)
    params = _assign(p.constants, None, budget, ds.n, 2, 3, overrides={"T": 1})
    rep = run_dp_bilevel(p, ds, np.zeros(2), RunConfig(seed=0), params, budget, inner_overrides={"T_cap": 50})
    assert len(rep.iterates) == 2 and rep.t_out == 0
    labels = sorted(e.label for e in rep.ledger.entries)
    assert labels == ["inner_g", "inner_penalty", "outer_noise"]
    assert rep.ledger.total.within(budget)


def test_per_iteration_spend_decomposition():
    p, ds = make_quadratic(A32, n=20_000, seed=0)
    budget = PrivacyBudget(1.0, 1e-5)
    params = _assign(p.constants, None, budget, ds.n, 2, 3, overrides={"T": 4})
    rep = run_dp_bilevel(p, ds, np.zeros(2), RunConfig(seed=0), params, budget, inner_overrides={"T_cap": 50})
    T = params.T
    for spend in rep.ledger.round_spends().values():
        assert spend.epsilon == pytest.approx(params.eps_working / math.sqrt(2 * T), rel=1e-9)
        assert spend.delta == pytest.approx(params.delta_working / (T + 1), rel=1e-12)
    assert 3 * params.eps_inner == pytest.approx(params.eps_working / math.sqrt(2 * T), rel=1e-12)
    assert rep.ledger.total.within(budget)


def test_minibatch_run_records_amplified_noise_and_stays_feasible():
    p, ds = make_quadratic(A32, n=20_000, seed=0)
    budget = PrivacyBudget(1.0, 1e-5)
    params = _assign(p.constants, None, budget, ds.n, 2, 3, b_out=500, overrides={"T": 3})
    cfg = RunConfig(seed=1, b_in=500, b_out=500)
    rep = run_dp_bilevel(p, ds, np.zeros(2), cfg, params, budget, inner_overrides={"T_cap": 50})
    assert all("batch_deviation" in i for i in rep.inner)
    assert all(p.feasible_x.contains(x) for x in rep.iterates)
    noise = [e for e in rep.ledger.entries if e.label == "outer_noise"]
    assert all(e.b == 500 and e.n == ds.n for e in noise)
    assert rep.ledger.total.within(budget)


def test_runs_reproducible_and_serializable():
    p, ds = make_quadratic(A32, n=20_000, seed=0)
    budget = PrivacyBudget(1.0, 1e-5)
    params = _assign(p.constants, None, budget, ds.n, 2, 3, overrides={"T": 3})
    a = run_dp_bilevel(p, ds, np.zeros(2), RunConfig(seed=5), params, budget, inner_overrides={"T_cap": 50})
    b = run_dp_bilevel(p, ds, np.zeros(2), RunConfig(seed=5), params, budget, inner_overrides={"T_cap": 50})
    assert a.to_json(timing=False) == b.to_json(timing=False)
    assert "timing" not in json.loads(a.to_json(timing=False))
    lines = a.trajectory_csv().strip().splitlines()
    assert lines[0].startswith("t,displacement") and len(lines) == params.T + 1


def test_infeasible_start_rejected():
    p, ds = make_quadratic(A32, n=20_000, seed=0)
    params = _assign(p.constants, None, PrivacyBudget(1.0, 1e-5), ds.n, 2, 3, overrides={"T": 1})
    with pytest.raises(PreconditionError):
        run_dp_bilevel(p, ds, np.array([5.0, 0.0]), RunConfig(), params)


def test_gradient_mapping_gap_bounded_by_penalty_error():
    p, ds = make_quadratic(A32, n=100, seed=3)
    ref, c = p.references, p.constants
    rng = np.random.default_rng(0)
    for lam in (10.0, 100.0, 1000.0):
        for _ in range(20):
            x = p.feasible_x.project(rng.uniform(-1, 1, 2))
            eta = 0.1
            gf = np.linalg.norm(p.feasible_x.gradient_mapping(x, ref["hypergradient"](x), eta))
            gl = np.linalg.norm(p.feasible_x.gradient_mapping(x, ref["penalty_gradient"](x, lam), eta))
            assert gf <= gl + c.ell * c.kappa**3 / lam


def test_mean_leak_private_run_reaches_target():
    rng = np.random.default_rng(0)
    n = 100_000
    ds = Dataset(rng.uniform(-0.2, 0.2, (n, 2)) + np.array([0.3, 0.0]))
    p = make_mean_leak(ds, R_x=1.0, record_radius=0.6, lower_scale="mean")
    budget = PrivacyBudget(1.0, 1e-6)
    params = _assign(p.constants, 0.5, budget, n, 2, 2)
    x0 = np.array([0.7, 0.7])
    assert np.linalg.norm(p.references["hypergradient"](x0)) > 2 * params.alpha
    rep = run_dp_bilevel(p, ds, x0, RunConfig(seed=0), params, budget, inner_overrides={"T_cap": 200})
    g = p.references["hypergradient"](rep.x_out)
    assert np.linalg.norm(p.feasible_x.gradient_mapping(rep.x_out, g, params.eta)) <= params.alpha
    assert rep.ledger.total.within(budget)

"""Penalty-based private outer loop.

Each outer iteration privately solves two strongly convex inner problems at the
current ``x``: the lower level ``g`` and the penalized objective ``f + lam g``.
From the two approximate minimizers it forms the first-order estimator

    g_t = grad_x f(x, y_lam) + lam (grad_x g(x, y_lam) - grad_x g(x, y)),

adds Gaussian noise and takes a projected step. The output is the iterate whose
step had the smallest displacement ``||x_{t+1} - x_t||``.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import streams
from .core import (
    BilevelProblem, Dataset, NumericalError, PreconditionError, PrivacyBudget, ProblemConstants,
    RunConfig,
)
from .geometry import ConvexSet
from .inner import InnerObjective, InnerParams, derive_inner_params, dp_loc_sgd
from .privacy import (
    PrivacyLedger, add_gaussian_noise, calibrate_gaussian, invert_amplification, split_outer_budget,
)

DEFAULT_OUTER_CONSTANTS = {
    "C_lambda": 1.0,   # lam = C_lambda * ell kappa^3 / alpha
    "C_T": 1.0,        # T = ceil(C_T * Delta_F ell kappa^3 / alpha^2)
    "C_eta": 1.0,      # eta = C_eta / (ell kappa^3), clamped to 1 / (2 L_smooth)
    "C_s": 1.0,        # L_smooth = C_s * ell kappa^3
    "C_sigma": None,   # optional floor sigma^2 >= C_sigma ell^2 kappa^2 T ln(T/delta) / (eps n)^2
    "C_L": 5.0,        # per-sample Lipschitz constant of the penalty estimator is C_L * ell kappa
    "K1": 1.0,         # multipliers on the two terms of the default target alpha
    "K2": 1.0,
    "C_beta": 1.0,     # multiplier on the predicted inner error in the beta diagnostic
}

# explicit values that bypass an assignment; recorded as deviations
EXPLICIT_KEYS = ("lambda", "T", "eta", "sigma2")

_EPS_MAX = 1.0 - 1e-9


class OuterWarning(UserWarning):
    pass


def _ceil(x: float) -> int:
    # guards against 99.99999999999999 style rounding in ratios that are integral
    return max(1, math.ceil(x * (1 - 1e-12)))


def alpha_bound(constants: ProblemConstants) -> tuple[float, str]:
    """Largest admissible target and the name of the binding constraint."""
    c = constants
    ek3 = c.ell * c.kappa**3
    terms = {
        "1/(2 kappa)": 1.0 / (2.0 * c.kappa),
        "L0g/L0f": c.L0g / c.L0f,
        "L1g/L1f": c.L1g / c.L1f,
        "Delta_F/(ell kappa)": c.Delta_F / (c.ell * c.kappa),
    }
    name = min(terms, key=terms.get)
    return ek3 * terms[name], name


def rate_alpha(constants: ProblemConstants, budget: PrivacyBudget, n: int, d_x: int, d_y: int,
               K1: float = 1.0, K2: float = 1.0) -> float:
    """Target stationarity from the full-batch rate with explicit constant multipliers."""
    c = constants
    k1 = K1 * c.Delta_F**0.25 * c.ell**0.75 * c.kappa**1.25
    k2 = K2 * c.Delta_F ** (1 / 6) * c.ell**0.5 * c.kappa ** (11 / 6)
    en = budget.epsilon * n
    return k1 * (math.sqrt(d_x) / en) ** 0.5 + k2 * (math.sqrt(d_y) / en) ** (1 / 3)


@dataclass(frozen=True)
class OuterParams:
    lam: float
    sigma2: float
    eta: float
    T: int
    alpha: float
    b_out: Optional[int]
    eps_inner: float
    delta_inner: float
    eps_working: float
    delta_working: float
    sensitivity: float
    eps_noise: float
    L_smooth: float
    clip: Optional[float] = None
    implied_C_sigma: float = float("nan")
    beta_predicted: float = float("nan")
    constants: dict = field(default_factory=dict)
    notes: tuple = ()

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "lam", "sigma2", "eta", "T", "alpha", "b_out", "eps_inner", "delta_inner", "eps_working",
            "delta_working", "sensitivity", "eps_noise", "L_smooth", "clip", "implied_C_sigma",
            "beta_predicted")}
        d["constants"] = dict(self.constants)
        d["notes"] = list(self.notes)
        return d


def assign_outer_params(constants: ProblemConstants, alpha: Optional[float], budget: PrivacyBudget,
                        n: int, d_x: int, d_y: int, b_out: Optional[int] = None,
                        overrides: Optional[dict] = None, clip: Optional[float] = None) -> OuterParams:
    const = dict(DEFAULT_OUTER_CONSTANTS)
    unknown = set(overrides or {}) - set(const) - set(EXPLICIT_KEYS)
    if unknown:
        raise ValueError(f"unknown outer constants: {sorted(unknown)}")
    const.update(overrides or {})
    notes = []
    c = constants
    ell, kappa = c.ell, c.kappa
    ek3 = ell * kappa**3
    if b_out is not None and not 1 <= b_out <= n:
        raise ValueError(f"b_out={b_out} outside [1, {n}]")

    bound, binding = alpha_bound(c)
    if alpha is None:
        alpha = rate_alpha(c, budget, n, d_x, d_y, const["K1"], const["K2"])
        notes.append(f"alpha set from the rate formula: {alpha:.6g}")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if alpha > bound:
        raise PreconditionError(
            f"target alpha={alpha:.6g} exceeds the admissible bound {bound:.6g} (binding: {binding})"
        )

    # the last term keeps the penalized inner problem lam mu_g / 2 strongly convex
    lam_min = max(2 * c.L1g / c.mu_g, c.L0f / c.L0g, c.L1f / c.L1g, 2 * c.L1f / c.mu_g)
    lam = const["C_lambda"] * ek3 / alpha
    if lam < lam_min:
        notes.append(f"lambda raised from {lam:.6g} to the validity floor {lam_min:.6g}")
        lam = lam_min
    T = _ceil(const["C_T"] * c.Delta_F * ek3 / alpha**2)
    L_smooth = const["C_s"] * ek3
    eta = min(const["C_eta"] / ek3, 1.0 / (2.0 * L_smooth))
    for key in EXPLICIT_KEYS:
        if key in const and const[key] is not None:
            notes.append(f"explicit {key}={const[key]} overrides the assignment")
    lam = float(const.get("lambda") or lam)
    T = int(const.get("T") or T)
    eta = float(const.get("eta") or eta)

    eps_in, delta_in = split_outer_budget(budget, T)
    if clip is not None:
        sens = 2.0 * clip / (b_out or n)
    else:
        sens = 2.0 * const["C_L"] * ell * kappa / (b_out or n)
    eps_noise = eps_in if b_out is None or b_out == n else invert_amplification(eps_in, b_out, n)
    if eps_noise >= 1:
        notes.append(f"outer per-step epsilon {eps_noise:.4g} capped below 1 for Gaussian calibration")
        eps_noise = _EPS_MAX
    sigma2 = calibrate_gaussian(sens, eps_noise, delta_in)
    scale = ell**2 * kappa**2 * T * math.log(T / budget.delta) / (budget.epsilon * n) ** 2
    if const["C_sigma"] is not None:
        sigma2 = max(sigma2, const["C_sigma"] * scale)
    if "sigma2" in const and const["sigma2"] is not None:
        if const["sigma2"] < sigma2:
            notes.append("explicit sigma2 below the calibrated level: the run is not private")
        sigma2 = float(const["sigma2"])

    # predicted inner errors for the beta diagnostic, constant C_beta
    eps_w = split_outer_budget(budget, T)[0]
    e_g = const["C_beta"] * c.L0g * math.sqrt(d_y) / (c.mu_g * n * eps_w)
    e_pen = 4.0 * e_g
    beta = (c.L1f + lam * c.L1g) * e_pen + lam * c.L1g * e_g
    for msg in notes:
        warnings.warn(msg, OuterWarning, stacklevel=2)
    return OuterParams(
        lam=float(lam), sigma2=float(sigma2), eta=float(eta), T=int(T), alpha=float(alpha), b_out=b_out,
        eps_inner=eps_in, delta_inner=delta_in, eps_working=eps_in * math.sqrt(18 * T),
        delta_working=delta_in * 3 * (T + 1), sensitivity=sens, eps_noise=eps_noise,
        L_smooth=L_smooth, clip=clip, implied_C_sigma=sigma2 / scale if scale > 0 else float("nan"),
        beta_predicted=beta, constants=const, notes=tuple(notes),
    )


def select_output(displacements) -> int:
    d = np.asarray(displacements, dtype=float)
    if d.size == 0:
        raise ValueError("no displacements recorded")
    return int(np.argmin(d))  # numpy returns the first index among ties


def clip_rows(rows: np.ndarray, c: float) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1)
    scale = np.minimum(1.0, c / np.maximum(norms, 1e-300))
    return rows * scale[:, None]


def estimate_hypergradient(problem: BilevelProblem, x, y_tilde, y_tilde_lambda, lam: float,
                           dataset: Dataset, batch=None, clip: Optional[float] = None) -> np.ndarray:
    """Un-noised penalty estimator over the full dataset or an index multiset."""
    pts = dataset.points if batch is None else dataset.points[np.asarray(batch, dtype=np.intp).ravel()]
    if pts.shape[0] == 0:
        raise ValueError("empty batch")
    rows = problem.per_sample_gradients("xf", x, y_tilde_lambda, pts)
    rows = rows + lam * (problem.per_sample_gradients("xg", x, y_tilde_lambda, pts)
                         - problem.per_sample_gradients("xg", x, y_tilde, pts))
    if clip is not None:
        rows = clip_rows(rows, clip)
    return rows.sum(axis=0) / pts.shape[0]


@dataclass
class ProxRun:
    iterates: np.ndarray
    displacements: np.ndarray
    t_out: int

    @property
    def x_out(self) -> np.ndarray:
        return self.iterates[self.t_out]


def noisy_prox_descent(h_oracle: Callable[[np.ndarray, int], np.ndarray], feasible: ConvexSet, x0,
                       eta: float, sigma2: float, T: int, rng: np.random.Generator) -> ProxRun:
    """``T`` steps ``x <- prox(x, v_t + nu_t)`` with ``v_t = h_oracle(x_t, t)``.

    The noise of step ``t`` comes from sub-stream ``t`` of ``rng``.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    x = feasible.project(np.asarray(x0, dtype=float))
    iterates = [x]
    disp = np.empty(T)
    for t in range(T):
        v = np.asarray(h_oracle(x, t), dtype=float)
        v = add_gaussian_noise(v, sigma2, streams.child(rng, t))
        x_new = feasible.prox_step(x, v, eta)
        if not np.all(np.isfinite(x_new)):
            raise NumericalError(f"outer iterate {t + 1} is not finite")
        disp[t] = np.linalg.norm(x_new - x)
        iterates.append(x_new)
        x = x_new
    return ProxRun(np.array(iterates), disp, select_output(disp))


@dataclass
class RunReport:
    iterates: np.ndarray
    displacements: np.ndarray
    t_out: int
    x_out: np.ndarray
    inner: list
    ledger: PrivacyLedger
    params: OuterParams
    inner_params: dict
    warnings: list
    seed: int
    wall_clock: float = 0.0
    cumulative_eps: list = field(default_factory=list)

    def to_dict(self, timing: bool = True) -> dict:
        d = {
            "seed": self.seed,
            "t_out": self.t_out,
            "x_out": self.x_out.tolist(),
            "iterates": self.iterates.tolist(),
            "displacements": self.displacements.tolist(),
            "inner": self.inner,
            "params": self.params.to_dict(),
            "inner_params": {k: v.to_dict() for k, v in self.inner_params.items()},
            "ledger": self.ledger.to_dict(),
            "warnings": list(self.warnings),
        }
        if timing:
            d["timing"] = {"wall_clock_seconds": self.wall_clock}
        return d

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing), indent=2)

    def trajectory_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "displacement", "ball_ratio_g", "ball_ratio_penalty", "y_gap", "batch_deviation",
                    "cumulative_epsilon"])
        for t, disp in enumerate(self.displacements):
            info = self.inner[t]
            w.writerow([t, repr(float(disp)), info["ball_ratio_g"], info["ball_ratio_penalty"],
                        info["y_gap"], info.get("batch_deviation", ""), self.cumulative_eps[t]])
        return buf.getvalue()


def inner_objectives(problem: BilevelProblem, dataset: Dataset, x: np.ndarray, lam: float,
                     full_batch: bool = True):
    """Objectives ``g(x, .)`` and ``f(x, .) + lam g(x, .)`` as solver handles."""
    n, d = dataset.n, problem.dim_y
    if problem.affine_inner is not None:
        ai = problem.affine_inner(x, dataset.points)
        if ai.shared:
            return (InnerObjective.affine(ai.hess_g, ai.offsets_g),
                    InnerObjective.affine(ai.hess_f + lam * ai.hess_g, ai.offsets_f + lam * ai.offsets_g))
        if full_batch:
            og, of = np.atleast_2d(ai.offsets_g), np.atleast_2d(ai.offsets_f)
            cg = og.sum(axis=0) / og.shape[0]
            cf = of.sum(axis=0) / of.shape[0]
            return (InnerObjective.affine_full_batch(ai.hess_g, cg, n),
                    InnerObjective.affine_full_batch(ai.hess_f + lam * ai.hess_g, cf + lam * cg, n))

    def pts(idx):
        return dataset.points if idx is None else dataset.points[idx]

    def grad_g(y, idx):
        p = pts(idx)
        return problem.per_sample_gradients("yg", x, y, p).sum(axis=0) / p.shape[0]

    def grad_pen(y, idx):
        p = pts(idx)
        rows = problem.per_sample_gradients("yf", x, y, p) + lam * problem.per_sample_gradients("yg", x, y, p)
        return rows.sum(axis=0) / p.shape[0]

    return InnerObjective(n, d, grad=grad_g), InnerObjective(n, d, grad=grad_pen)


def inner_params_for(problem: BilevelProblem, n: int, params: OuterParams, b_in: Optional[int],
                     overrides: Optional[dict] = None) -> dict[str, InnerParams]:
    """Inner parameters for the two solves of every outer iteration.

    The lower level is ``mu_g``-strongly convex with per-sample gradients bounded
    by ``L0g``. The penalized objective ``f + lam g`` is
    ``(lam mu_g - L1f)``-strongly convex, which is at least ``lam mu_g / 2`` once
    ``lam >= 2 L1f / mu_g``, and its per-sample gradients are bounded by
    ``L0f + lam L0g``. Problems may declare tighter constants for the ``y``
    block alone in ``metadata["inner_constants"]`` (keys ``L0f``, ``L0g``, ``L1f``).
    """
    c = problem.constants
    yc = dict(problem.metadata.get("inner_constants", {}))
    L0f, L0g, L1f = yc.get("L0f", c.L0f), yc.get("L0g", c.L0g), yc.get("L1f", c.L1f)
    mu_pen = params.lam * c.mu_g - L1f
    if mu_pen < params.lam * c.mu_g / 2 * (1 - 1e-12):
        raise PreconditionError(
            f"lambda={params.lam:.6g} is below 2 L1f / mu_g = {2 * L1f / c.mu_g:.6g}; "
            "the penalized inner problem is not strongly convex enough"
        )
    R0 = problem.inner_domain_radius
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        g = derive_inner_params(c.mu_g, L0g, n, problem.dim_y, params.eps_inner, params.delta_inner,
                                b_in, R0, overrides)
        pen = derive_inner_params(mu_pen, L0f + params.lam * L0g, n, problem.dim_y,
                                  params.eps_inner, params.delta_inner, b_in, R0, overrides)
    return {"g": g, "penalty": pen}


InnerSolver = Callable[[str, np.ndarray, float], np.ndarray]


def run_dp_bilevel(problem: BilevelProblem, dataset: Dataset, x0, config: RunConfig, params: OuterParams,
                   budget: Optional[PrivacyBudget] = None, y0=None, inner_overrides: Optional[dict] = None,
                   inner_solver: Optional[InnerSolver] = None) -> RunReport:
    """Full-batch run when ``params.b_out`` is None, mini-batch otherwise.

    ``inner_solver(which, x, lam)`` replaces the private inner solves (for
    deterministic checks); such runs record no inner spend and are flagged.
    """
    t_start = time.perf_counter()
    config.check_batches(dataset.n)
    n = dataset.n
    x0 = np.asarray(x0, dtype=float)
    if not problem.feasible_x.contains(x0):
        raise PreconditionError("x0 lies outside the feasible set")
    y_start = problem.inner_center if y0 is None else np.asarray(y0, dtype=float)
    ledger = PrivacyLedger(round_rule="advanced", hard_budget=budget)
    notes = list(params.notes)
    # a supplied solver replaces the private solves, so their parameters are never derived
    inner_p = {} if inner_solver is not None else inner_params_for(problem, n, params, config.b_in,
                                                                   inner_overrides)
    for p in inner_p.values():
        for w in p.warnings:
            if w not in notes:
                notes.append(w)
    if inner_solver is not None:
        notes.append("inner solves replaced by a supplied solver; inner spend not recorded")
    lam = params.lam
    seed = config.seed
    inner_log: list[dict] = []
    cum_eps: list[float] = []
    batch_mode = params.b_out is not None and params.b_out < n

    def oracle(x, t):
        if inner_solver is None:
            obj_g, obj_pen = inner_objectives(problem, dataset, x, lam, full_batch=config.b_in in (None, n))
            rg = dp_loc_sgd(obj_g, y_start, inner_p["g"], streams.stream(seed, streams.INNER_G, t),
                            ledger=ledger, label="inner_g", round_id=t)
            rp = dp_loc_sgd(obj_pen, y_start, inner_p["penalty"],
                            streams.stream(seed, streams.INNER_PENALTY, t),
                            ledger=ledger, label="inner_penalty", round_id=t)
            y, y_lam = rg.y, rp.y
            info = {"ball_ratio_g": rg.max_ball_ratio, "ball_ratio_penalty": rp.max_ball_ratio}
        else:
            y, y_lam = inner_solver("g", x, lam), inner_solver("penalty", x, lam)
            info = {"ball_ratio_g": "", "ball_ratio_penalty": ""}
        info["y_gap"] = float(np.linalg.norm(y - y_lam))
        if batch_mode:
            batch = streams.stream(seed, streams.OUTER_BATCH, t).integers(0, n, size=params.b_out)
            v = estimate_hypergradient(problem, x, y, y_lam, lam, dataset, batch, params.clip)
            full = estimate_hypergradient(problem, x, y, y_lam, lam, dataset, None, params.clip)
            info["batch_deviation"] = float(np.linalg.norm(v - full))
            ledger.record("outer_noise", params.eps_noise, params.delta_inner, "basic", round=t,
                          b=params.b_out, n=n)
        else:
            v = estimate_hypergradient(problem, x, y, y_lam, lam, dataset, None, params.clip)
            ledger.record("outer_noise", params.eps_noise, params.delta_inner, "basic", round=t)
        info["y"] = y.tolist()
        info["y_lambda"] = y_lam.tolist()
        inner_log.append(info)
        cum_eps.append(ledger.total.epsilon)
        return v

    run = noisy_prox_descent(oracle, problem.feasible_x, x0, params.eta, params.sigma2, params.T,
                             streams.stream(seed, streams.OUTER_NOISE))
    return RunReport(run.iterates, run.displacements, run.t_out, run.x_out, inner_log, ledger, params,
                     inner_p, notes, seed, time.perf_counter() - t_start, cum_eps)

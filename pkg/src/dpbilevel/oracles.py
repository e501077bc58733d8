"""Non-private reference computations used to verify the private solvers.

Nothing here is private. The solver modules do not import this module; tests
and the verification suite compare solver outputs against it.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .core import BilevelProblem, Dataset, NumericalError, PreconditionError, full_batch_gradient
from .geometry import ConvexSet

INNER_KINDS = ("g", "f_plus_lambda_g")


def _inner_grad(problem: BilevelProblem, dataset: Dataset, x, which: str, lam: float):
    if which == "g":
        return lambda y: full_batch_gradient(problem, "yg", x, y, dataset)
    if which in ("f_plus_lambda_g", "penalty"):
        return lambda y: (full_batch_gradient(problem, "yf", x, y, dataset)
                          + lam * full_batch_gradient(problem, "yg", x, y, dataset))
    raise ValueError(f"unknown inner objective {which!r}; expected one of {INNER_KINDS}")


def solve_inner_exact(problem: BilevelProblem, dataset: Dataset, x, which: str = "g", lam: float = 0.0,
                      tol: float = 1e-10, y0=None, max_iter: int = 200_000) -> np.ndarray:
    """Deterministic gradient descent with step ``1/smoothness`` until the
    gradient norm is at most ``tol``."""
    c = problem.constants
    x = np.asarray(x, dtype=float)
    grad = _inner_grad(problem, dataset, x, which, lam)
    smooth = c.L1g if which == "g" else c.L1f + lam * c.L1g
    if which != "g" and lam * c.mu_g < c.L1f:
        raise PreconditionError("penalized inner objective is not strongly convex for this lambda")
    step = 1.0 / smooth
    y = np.array(problem.inner_center if y0 is None else y0, dtype=float)
    for _ in range(max_iter):
        gy = grad(y)
        if not np.all(np.isfinite(gy)):
            raise NumericalError("non-finite gradient in the reference inner solve")
        if np.linalg.norm(gy) <= tol:
            return y
        y = y - step * gy
    raise NumericalError(f"reference inner solve did not reach tol={tol} in {max_iter} iterations")


def _mean_hessians(problem: BilevelProblem, dataset: Dataset, x, y):
    if problem.hess_xy_g is None or problem.hess_yy_g is None:
        raise PreconditionError(
            f"problem {problem.name!r} lacks second-order oracles; use finite_difference_hypergradient"
        )
    return (np.asarray(problem.hess_xy_g(x, y, dataset.points), float),
            np.asarray(problem.hess_yy_g(x, y, dataset.points), float))


def exact_hypergradient(problem: BilevelProblem, dataset: Dataset, x, tol: float = 1e-10) -> np.ndarray:
    """``grad_x f - H_xy H_yy^{-1} grad_y f`` at ``(x, y*(x))`` via a direct solve."""
    x = np.asarray(x, dtype=float)
    if problem.hess_xy_g is None or problem.hess_yy_g is None:
        _mean_hessians(problem, dataset, x, None)
    y = solve_inner_exact(problem, dataset, x, "g", tol=tol)
    hxy, hyy = _mean_hessians(problem, dataset, x, y)
    gx = full_batch_gradient(problem, "xf", x, y, dataset)
    gy = full_batch_gradient(problem, "yf", x, y, dataset)
    return gx - hxy @ np.linalg.solve(hyy, gy)


def penalty_gradient_exact(problem: BilevelProblem, dataset: Dataset, x, lam: float,
                           tol: float = 1e-10) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    y = solve_inner_exact(problem, dataset, x, "g", tol=tol)
    y_lam = solve_inner_exact(problem, dataset, x, "f_plus_lambda_g", lam, tol=tol)
    return (full_batch_gradient(problem, "xf", x, y_lam, dataset)
            + lam * (full_batch_gradient(problem, "xg", x, y_lam, dataset)
                     - full_batch_gradient(problem, "xg", x, y, dataset)))


def penalty_rows(problem: BilevelProblem, dataset: Dataset, x, lam: float, y=None, y_lam=None,
                 tol: float = 1e-10) -> np.ndarray:
    """Per-sample penalty gradients at the exact inner points (or the given ones)."""
    x = np.asarray(x, dtype=float)
    if y is None:
        y = solve_inner_exact(problem, dataset, x, "g", tol=tol)
    if y_lam is None:
        y_lam = solve_inner_exact(problem, dataset, x, "f_plus_lambda_g", lam, tol=tol)
    p = dataset.points
    return (problem.per_sample_gradients("xf", x, y_lam, p)
            + lam * (problem.per_sample_gradients("xg", x, y_lam, p)
                     - problem.per_sample_gradients("xg", x, y, p)))


def _mean_value(problem, which, x, y, dataset):
    return float(problem.values(which, x, y, dataset.points).sum() / dataset.n)


def hyperobjective(problem: BilevelProblem, dataset: Dataset, x, tol: float = 1e-10) -> float:
    y = solve_inner_exact(problem, dataset, x, "g", tol=tol)
    return _mean_value(problem, "f", x, y, dataset)


def penalty_value(problem: BilevelProblem, dataset: Dataset, x, lam: float, tol: float = 1e-10) -> float:
    y = solve_inner_exact(problem, dataset, x, "g", tol=tol)
    y_lam = solve_inner_exact(problem, dataset, x, "f_plus_lambda_g", lam, tol=tol)
    return (_mean_value(problem, "f", x, y_lam, dataset)
            + lam * (_mean_value(problem, "g", x, y_lam, dataset) - _mean_value(problem, "g", x, y, dataset)))


def central_difference(fun: Callable[[np.ndarray], float], x, h: Optional[float] = None) -> np.ndarray:
    """Central differences with step ``1e-5 (1 + ||x||)`` unless given."""
    x = np.asarray(x, dtype=float)
    if h is None:
        h = 1e-5 * (1.0 + np.linalg.norm(x))
    out = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        out[k] = (fun(x + e) - fun(x - e)) / (2 * h)
    return out


def finite_difference_hypergradient(problem: BilevelProblem, dataset: Dataset, x, tol: float = 1e-10):
    return central_difference(lambda z: hyperobjective(problem, dataset, z, tol), x)


def relative_error(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    diff = float(np.linalg.norm(a - b))
    return diff if scale < 1e-8 else diff / scale


@dataclass
class PenaltyDiagnostics:
    lam: float
    value_gap: float
    gradient_gap: float
    distance: float
    bound: float

    @property
    def within_bound(self) -> bool:
        return self.distance <= self.bound + 1e-10


def diagnostics_sweep(problem: BilevelProblem, dataset: Dataset, x, lambdas: Sequence[float],
                      tol: float = 1e-10) -> list[PenaltyDiagnostics]:
    x = np.asarray(x, dtype=float)
    c = problem.constants
    y = solve_inner_exact(problem, dataset, x, "g", tol=tol)
    F = _mean_value(problem, "f", x, y, dataset)
    hg = (problem.references["hypergradient"](x) if "hypergradient" in problem.references
          else exact_hypergradient(problem, dataset, x, tol))
    gx_star = full_batch_gradient(problem, "xg", x, y, dataset)
    g_star = _mean_value(problem, "g", x, y, dataset)
    out = []
    for lam in lambdas:
        y_lam = solve_inner_exact(problem, dataset, x, "f_plus_lambda_g", lam, tol=tol, y0=y)
        L = _mean_value(problem, "f", x, y_lam, dataset) + lam * (_mean_value(problem, "g", x, y_lam, dataset) - g_star)
        grad = (full_batch_gradient(problem, "xf", x, y_lam, dataset)
                + lam * (full_batch_gradient(problem, "xg", x, y_lam, dataset) - gx_star))
        out.append(PenaltyDiagnostics(float(lam), abs(L - F), float(np.linalg.norm(grad - hg)),
                                      float(np.linalg.norm(y_lam - y)), c.L0f / (lam * c.mu_g)))
    return out


def loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])


def write_diagnostics_csv(records: Sequence[PenaltyDiagnostics], path):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["lam", "value_gap", "gradient_gap", "distance", "bound"])
        w.writeheader()
        for r in records:
            w.writerow(asdict(r))


def sample_in_set(feasible: ConvexSet, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """A random point of the set (bounded sets are sampled throughout, others near the origin)."""
    d = feasible.dim
    v = feasible.variant
    if v == "ball":
        z = rng.standard_normal(d)
        z *= feasible.radius * rng.random() ** (1.0 / d) / np.linalg.norm(z)
        return feasible.center + z
    if v == "box":
        lo = np.where(np.isfinite(feasible.lo), feasible.lo, -scale)
        hi = np.where(np.isfinite(feasible.hi), feasible.hi, scale)
        return lo + (hi - lo) * rng.random(d)
    if v == "nonneg_orthant":
        return scale * rng.random(d)
    if v == "simplex":
        return feasible.scale * rng.dirichlet(np.ones(d))
    return scale * rng.standard_normal(d)


def _sample_y(problem: BilevelProblem, rng, radius_factor: float = 2.0) -> np.ndarray:
    ball = ConvexSet.ball(problem.inner_center, radius_factor * problem.inner_domain_radius)
    return sample_in_set(ball, rng)


def ylambda_lipschitz_check(problem: BilevelProblem, dataset: Dataset, lam: float, num_pairs: int = 100,
                            seed: int = 0, tol: float = 1e-10) -> float:
    c = problem.constants
    if lam < 2 * c.L1f / c.mu_g:
        raise PreconditionError("lambda must be at least 2 L1f / mu_g")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(num_pairs):
        x1 = sample_in_set(problem.feasible_x, rng)
        x2 = sample_in_set(problem.feasible_x, rng)
        dx = np.linalg.norm(x1 - x2)
        if dx < 1e-12:
            continue
        y1 = solve_inner_exact(problem, dataset, x1, "f_plus_lambda_g", lam, tol)
        y2 = solve_inner_exact(problem, dataset, x2, "f_plus_lambda_g", lam, tol)
        worst = max(worst, float(np.linalg.norm(y1 - y2) / dx))
    return worst


def gradient_check(problem: BilevelProblem, num_points: int = 100, seed: int = 0,
                   dataset: Optional[Dataset] = None) -> dict[str, float]:
    """Largest relative error of each per-sample gradient oracle against central
    differences of the value oracles, over random points and records."""
    if problem.f is None or problem.g is None:
        raise PreconditionError("gradient check needs value oracles")
    rng = np.random.default_rng(seed)
    worst = {k: 0.0 for k in ("xf", "yf", "xg", "yg")}
    for _ in range(num_points):
        x = sample_in_set(problem.feasible_x, rng)
        y = _sample_y(problem, rng)
        if dataset is not None:
            rec = dataset.points[rng.integers(dataset.n)][None, :]
        else:
            rec = problem.metadata["sample_record"](rng)[None, :]
        for which in worst:
            analytic = problem.per_sample_gradients(which, x, y, rec)[0]
            fn = problem.f if which[1] == "f" else problem.g
            if which[0] == "x":
                fd = central_difference(lambda z: float(fn(z, y, rec)[0]), x)
            else:
                fd = central_difference(lambda z: float(fn(x, z, rec)[0]), y)
            worst[which] = max(worst[which], relative_error(analytic, fd))
    return worst


@dataclass
class ConstantCertificate:
    name: str
    declared: float
    observed: float
    lower_bound: bool = False

    @property
    def ok(self) -> bool:
        if self.lower_bound:
            return self.observed >= self.declared * (1 - 1e-9)
        return self.observed <= self.declared * (1 + 1e-9)


def certify_constants(problem: BilevelProblem, dataset: Dataset, num_pairs: int = 10_000,
                      seed: int = 0) -> list[ConstantCertificate]:
    """Sampled difference quotients against the declared constants.

    Pairs ``(x, y)`` range over the feasible set and the doubled inner ball;
    records are drawn from the dataset. Gradients are joint in ``(x, y)``.
    """
    rng = np.random.default_rng(seed)
    c = problem.constants
    pts = dataset.points
    idx = rng.integers(0, dataset.n, size=num_pairs)
    obs = {"L0f": 0.0, "L1f": 0.0, "L0g": 0.0, "L1g": 0.0, "L2g": 0.0, "mu_g": math.inf}

    def joint(kind, x, y, rec):
        return np.concatenate([problem.per_sample_gradients("x" + kind, x, y, rec)[0],
                               problem.per_sample_gradients("y" + kind, x, y, rec)[0]])

    for k in range(num_pairs):
        rec = pts[idx[k]][None, :]
        x1, x2 = sample_in_set(problem.feasible_x, rng), sample_in_set(problem.feasible_x, rng)
        y1, y2 = _sample_y(problem, rng), _sample_y(problem, rng)
        dz = math.sqrt(float(np.sum((x1 - x2) ** 2) + np.sum((y1 - y2) ** 2)))
        for kind in ("f", "g"):
            g1, g2 = joint(kind, x1, y1, rec), joint(kind, x2, y2, rec)
            obs["L0" + kind] = max(obs["L0" + kind], float(np.linalg.norm(g1)), float(np.linalg.norm(g2)))
            if dz > 1e-12:
                obs["L1" + kind] = max(obs["L1" + kind], float(np.linalg.norm(g1 - g2)) / dz)
        if problem.hess_yy_g is not None and problem.hess_xy_g is not None and dz > 1e-12:
            h1 = np.block([[problem.hess_xy_g(x1, y1, rec)], [problem.hess_yy_g(x1, y1, rec)]])
            h2 = np.block([[problem.hess_xy_g(x2, y2, rec)], [problem.hess_yy_g(x2, y2, rec)]])
            obs["L2g"] = max(obs["L2g"], float(np.linalg.norm(h1 - h2, 2)) / dz)
        if k < min(num_pairs, 2000):
            dy = y1 - y2
            ny = float(dy @ dy)
            if ny > 1e-20:
                gy1 = full_batch_gradient(problem, "yg", x1, y1, dataset)
                gy2 = full_batch_gradient(problem, "yg", x1, y2, dataset)
                obs["mu_g"] = min(obs["mu_g"], float((gy1 - gy2) @ dy) / ny)
    out = [ConstantCertificate(name, getattr(c, name), obs[name]) for name in ("L0f", "L1f", "L0g", "L1g", "L2g")]
    out.append(ConstantCertificate("mu_g", c.mu_g, obs["mu_g"], lower_bound=True))
    return out

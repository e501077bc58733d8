"""Quadratic bilevel family with closed-form minimizers and hypergradients.

Each record is ``(a_i, b_i, c_i)`` with ``a_i`` in R^{d_x} and ``b_i, c_i`` in
R^{d_y}, stored as one flat row. The per-sample losses are

    f_i(x, y) = 1/2 ||x - a_i||^2 + 1/2 ||y - b_i||^2
    g_i(x, y) = 1/2 ||y - A x - c_i||^2

so ``y*(x) = A x + mean(c)`` and ``mu_g = 1``. Constants are certified over
``x`` in the ball of radius ``R_x`` and ``y`` in the ball of radius ``2 R_y``,
which holds every point the localized inner solver can visit.
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from ..core import AffineInner, BilevelProblem, Dataset, ProblemConstants
from ..geometry import ConvexSet


def _ball_samples(rng, n, d, r):
    if r == 0:
        return np.zeros((n, d))
    z = rng.standard_normal((n, d))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    return z * (r * rng.random((n, 1)) ** (1.0 / d))


def quadratic_constants(A: np.ndarray, R_x: float, r_a: float, r_b: float, r_c: float) -> tuple[ProblemConstants, float]:
    nA = float(np.linalg.norm(A, 2)) if A.size else 0.0
    R_y = max(r_b, r_c + nA * R_x)
    ry2 = 2.0 * R_y
    L0f = math.hypot(R_x + r_a, ry2 + r_b)
    L0g = math.sqrt(1.0 + nA**2) * (ry2 + nA * R_x + r_c)
    L1g = 1.0 + nA**2
    delta = 0.5 * (R_x + r_a) ** 2 + 0.5 * (nA * R_x + r_c + r_b) ** 2
    return ProblemConstants(L0f=L0f, L1f=1.0, L0g=L0g, L1g=L1g, L2g=0.0, mu_g=1.0, Delta_F=delta), R_y


def split_records(points: np.ndarray, d_x: int, d_y: int):
    return points[:, :d_x], points[:, d_x:d_x + d_y], points[:, d_x + d_y:d_x + 2 * d_y]


def make_quadratic(A, n: int = 100, seed: int = 0, r_a: float = 1.0, r_b: float = 1.0, r_c: float = 1.0,
                   R_x: float = 1.0, dataset: Optional[Dataset] = None) -> tuple[BilevelProblem, Dataset]:
    """Problem and dataset. Records are drawn uniformly from the declared balls
    unless ``dataset`` is given, in which case they are checked against them."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    d_y, d_x = A.shape
    if not np.all(np.isfinite(A)):
        raise ValueError("coupling matrix must be finite")
    if dataset is None:
        rng = np.random.default_rng(seed)
        pts = np.hstack([_ball_samples(rng, n, d_x, r_a), _ball_samples(rng, n, d_y, r_b),
                         _ball_samples(rng, n, d_y, r_c)])
        dataset = Dataset(pts)
    if dataset.points.shape[1] != d_x + 2 * d_y:
        raise ValueError(f"records need {d_x + 2 * d_y} columns, got {dataset.points.shape[1]}")
    a, b, c = split_records(dataset.points, d_x, d_y)
    tol = 1e-9
    for name, arr, r in (("a", a, r_a), ("b", b, r_b), ("c", c, r_c)):
        if np.any(np.linalg.norm(arr, axis=1) > r * (1 + tol) + tol):
            raise ValueError(f"records {name}_i exceed the declared radius {r}")
    constants, R_y = quadratic_constants(A, R_x, r_a, r_b, r_c)

    def parts(p):
        return split_records(p, d_x, d_y)

    def grad_x_f(x, y, p):
        return x - parts(p)[0]

    def grad_y_f(x, y, p):
        return y - parts(p)[1]

    def resid(x, y, p):
        return y - A @ x - parts(p)[2]

    def grad_x_g(x, y, p):
        return -resid(x, y, p) @ A

    def grad_y_g(x, y, p):
        return resid(x, y, p)

    def f(x, y, p):
        pa, pb, _ = parts(p)
        return 0.5 * np.sum((x - pa) ** 2, axis=1) + 0.5 * np.sum((y - pb) ** 2, axis=1)

    def g(x, y, p):
        return 0.5 * np.sum(resid(x, y, p) ** 2, axis=1)

    def hess_xy_g(x, y, p):
        return -A.T.copy()

    def hess_yy_g(x, y, p):
        return np.eye(d_y)

    def affine(x, p):
        _, pb, pc = parts(p)
        return AffineInner(np.eye(d_y), pb, np.eye(d_y), A @ x + pc, shared=True)

    a_bar, b_bar, c_bar = a.mean(axis=0), b.mean(axis=0), c.mean(axis=0)

    def y_star(x):
        return A @ np.asarray(x, float) + c_bar

    def y_lambda(x, lam):
        return (b_bar + lam * y_star(x)) / (1.0 + lam)

    def hypergradient(x):
        x = np.asarray(x, float)
        return x - a_bar + A.T @ (y_star(x) - b_bar)

    def penalty_gradient(x, lam):
        x = np.asarray(x, float)
        return x - a_bar + (lam / (1.0 + lam)) * (A.T @ (y_star(x) - b_bar))

    def hyperobjective(x):
        return float(np.mean(f(np.asarray(x, float), y_star(x), dataset.points)))

    problem = BilevelProblem(
        name="quadratic", dim_x=d_x, dim_y=d_y,
        grad_x_f=grad_x_f, grad_y_f=grad_y_f, grad_x_g=grad_x_g, grad_y_g=grad_y_g,
        constants=constants, feasible_x=ConvexSet.ball(np.zeros(d_x), R_x), inner_domain_radius=R_y,
        f=f, g=g, hess_xy_g=hess_xy_g, hess_yy_g=hess_yy_g, affine_inner=affine,
        references={"y_star": y_star, "y_lambda": y_lambda, "hypergradient": hypergradient,
                    "penalty_gradient": penalty_gradient, "hyperobjective": hyperobjective},
        metadata={"A": A.tolist(), "r_a": r_a, "r_b": r_b, "r_c": r_c, "R_x": R_x, "R_y": R_y,
                  "domain": {"x_radius": R_x, "y_radius": 2 * R_y},
                  "record_radii": {"a": r_a, "b": r_b, "c": r_c}},
    )
    return problem, dataset

"""The mean-leak construction.

Upper level ``f(x, y) = 1/2 ||x + y||^2`` and lower level
``g(x, y) = 1/2 sum_i ||y - xi_i||^2``. The lower-level minimizer is the data
mean for every ``x`` and the hypergradient is ``x + mean(xi)``, so a single
exact hypergradient evaluated at the origin reveals the dataset mean. The lower
level is written as the average of ``g_i = (n/2) ||y - xi_i||^2``.

``lower_scale="mean"`` divides the lower level by ``n``. Minimizers and the
hyperobjective are unchanged but the constants no longer grow with ``n``,
which is what a private run needs.
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from ..core import AffineInner, BilevelProblem, Dataset, ProblemConstants
from ..geometry import ConvexSet


def make_mean_leak(dataset: Dataset, R_x: float = 1.0, record_radius: Optional[float] = None,
                   lower_scale: str = "sum") -> BilevelProblem:
    """``record_radius`` bounds ``||xi_i||``; it defaults to the largest record norm,
    which is a data-dependent declaration and is flagged in the metadata."""
    if dataset.n < 1:
        raise ValueError("dataset must be non-empty")
    if lower_scale not in ("sum", "mean"):
        raise ValueError(f"lower_scale must be 'sum' or 'mean', got {lower_scale!r}")
    pts = dataset.points
    n, d = pts.shape
    s = float(n) if lower_scale == "sum" else 1.0
    norms = np.linalg.norm(pts, axis=1)
    data_dependent = record_radius is None
    r = float(norms.max()) if data_dependent else float(record_radius)
    r = max(r, 1e-12)
    if np.any(norms > r * (1 + 1e-9)):
        raise ValueError(f"records exceed the declared radius {r}")

    def grad_x_f(x, y, p):
        return np.broadcast_to(x + y, (p.shape[0], d)).copy()

    grad_y_f = grad_x_f

    def grad_x_g(x, y, p):
        return np.zeros((p.shape[0], d))

    def grad_y_g(x, y, p):
        return s * (y - p)

    def f(x, y, p):
        return np.full(p.shape[0], 0.5 * float((x + y) @ (x + y)))

    def g(x, y, p):
        return 0.5 * s * np.sum((y - p) ** 2, axis=1)

    def hess_xy_g(x, y, p):
        return np.zeros((d, d))

    def hess_yy_g(x, y, p):
        return s * np.eye(d)

    def affine(x, p):
        m = p.shape[0]
        return AffineInner(np.eye(d), np.broadcast_to(-x, (m, d)).copy(), s * np.eye(d), s * p, shared=True)

    mean = pts.mean(axis=0)
    y_dom = 2 * r  # localized iterates stay within twice the initial radius
    constants = ProblemConstants(
        L0f=math.sqrt(2.0) * (R_x + y_dom),
        L1f=2.0,
        L0g=s * (y_dom + r),
        L1g=s,
        L2g=0.0,
        mu_g=s,
        Delta_F=0.5 * (R_x + r) ** 2,
    )
    return BilevelProblem(
        name="mean_leak", dim_x=d, dim_y=d,
        grad_x_f=grad_x_f, grad_y_f=grad_y_f, grad_x_g=grad_x_g, grad_y_g=grad_y_g,
        constants=constants, feasible_x=ConvexSet.ball(np.zeros(d), R_x), inner_domain_radius=r,
        f=f, g=g, hess_xy_g=hess_xy_g, hess_yy_g=hess_yy_g, affine_inner=affine,
        references={
            "y_star": lambda x: mean.copy(),
            "y_lambda": lambda x, lam: (lam * s * mean - np.asarray(x, float)) / (1.0 + lam * s),
            "hypergradient": lambda x: np.asarray(x, float) + mean,
            "hyperobjective": lambda x: 0.5 * float(np.sum((np.asarray(x, float) + mean) ** 2)),
        },
        metadata={"record_radius": r, "record_radius_from_data": data_dependent, "R_x": R_x,
                  "lower_scale": lower_scale},
    )

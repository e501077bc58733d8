"""Reusable experiment drivers shared by the command line and the test suite."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import streams
from .geometry import ConvexSet
from .inner import InnerObjective, derive_inner_params, dp_loc_sgd
from .outer import noisy_prox_descent


def _unit_ball(rng, n, d):
    z = rng.standard_normal((n, d))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    return z * rng.random((n, 1)) ** (1.0 / d)


@dataclass(frozen=True)
class ScalingRow:
    n: int
    median_error: float
    max_ball_ratio: float
    errors: tuple

    def to_row(self) -> list:
        return [self.n, repr(self.median_error), repr(self.max_ball_ratio)]


def inner_scaling_instance(n: int, d: int = 10, data_seed: int = 0):
    """Finite sum ``h_i(y) = 1/2 ||y||^2 - c_i^T y`` with ``c_i`` uniform in the unit ball.

    Returns the affine objective, its minimizer and the constants ``(mu, L, R0)``:
    ``mu = 1``, the initial ball is the unit ball and gradients over the twice
    larger ball that localized iterates can reach are bounded by ``L = 3``.
    """
    c = _unit_ball(np.random.default_rng([data_seed, n]), n, d)
    obj = InnerObjective.affine(np.eye(d), c)
    return obj, obj.minimizer(), 1.0, 3.0, 1.0


def scaling_sweep(ns: Sequence[int], seeds: int = 20, d: int = 10, eps_prime: float = 1.0,
                  delta_prime: float = 1e-2, overrides: Optional[dict] = None,
                  data_seed: int = 0, seed: int = 0) -> list[ScalingRow]:
    """Median distance ``||y_out - y*||`` of the private inner solver across seeds for every ``n``."""
    rows = []
    for n in ns:
        obj, y_star, mu, L, R0 = inner_scaling_instance(int(n), d, data_seed)
        params = derive_inner_params(mu, L, int(n), d, eps_prime, delta_prime, None, R0, overrides)
        errs, worst = [], 0.0
        for s in range(seeds):
            res = dp_loc_sgd(obj, np.zeros(d), params, streams.stream(seed, streams.MISC, int(n), s))
            errs.append(float(np.linalg.norm(res.y - y_star)))
            worst = max(worst, res.max_ball_ratio)
        rows.append(ScalingRow(int(n), float(np.median(errs)), worst, tuple(errs)))
    return rows


@dataclass(frozen=True)
class SmoothTestFunction:
    """``h(x) = sum_j (a/2 x_j^2 + b cos(2 x_j))``, nonconvex when ``4b > a``.

    ``h'' = a - 4 b cos(2 x)`` so ``h`` is ``(a + 4b)``-smooth, and
    ``inf h = d (b cos(2 x*) + a x*^2 / 2)`` is found per coordinate.
    """

    dim: int = 20
    a: float = 1.0
    b: float = 0.4

    @property
    def L(self) -> float:
        return self.a + 4.0 * self.b

    def value(self, x) -> float:
        x = np.asarray(x, float)
        return float(np.sum(0.5 * self.a * x * x + self.b * np.cos(2 * x)))

    def grad(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        return self.a * x - 2.0 * self.b * np.sin(2 * x)

    def infimum(self) -> float:
        u = np.linspace(-5, 5, 200_001)
        return self.dim * float(np.min(0.5 * self.a * u * u + self.b * np.cos(2 * u)))


@dataclass(frozen=True)
class PropositionRun:
    seed: int
    t_out: int
    grad_mapping_norm: float
    passed: bool


def proposition_check(alpha: float = 0.5, seeds: int = 20, dim: int = 20, gamma: float = 0.1,
                      bias_fraction: float = 1 / 8, noise_fraction: float = 1 / 8, box: float = 3.0,
                      x0_value: float = 2.5, seed: int = 0, h: Optional[SmoothTestFunction] = None):
    """Noisy prox descent on a smooth nonconvex ``h`` with an adversarial gradient bias.

    The oracle returns ``grad h - beta grad h / ||grad h||`` with ``beta = bias_fraction alpha``,
    the noise level solves ``sigma sqrt(d log(T / gamma)) = noise_fraction alpha``, the step is
    ``1 / (2L)`` and ``T = ceil(12 L (h(x0) - inf h) / alpha^2)``. Returns the per-seed runs and
    the settings.
    """
    h = h or SmoothTestFunction(dim=dim)
    feasible = ConvexSet.box(-box * np.ones(h.dim), box * np.ones(h.dim))
    x0 = np.full(h.dim, x0_value)
    gap = h.value(x0) - h.infimum()
    T = math.ceil(12.0 * h.L * gap / alpha**2)
    eta = 1.0 / (2.0 * h.L)
    beta = bias_fraction * alpha
    sigma = noise_fraction * alpha / math.sqrt(h.dim * math.log(T / gamma))

    def oracle(x, t):
        g = h.grad(x)
        nrm = float(np.linalg.norm(g))
        return g if nrm == 0 else g - beta * g / nrm

    runs = []
    for s in range(seeds):
        run = noisy_prox_descent(oracle, feasible, x0, eta, sigma**2, T, streams.stream(seed, streams.MISC, s))
        gm = float(np.linalg.norm(feasible.gradient_mapping(run.x_out, h.grad(run.x_out), eta)))
        runs.append(PropositionRun(s, run.t_out, gm, gm <= alpha))
    settings = {"alpha": alpha, "T": T, "eta": eta, "beta": beta, "sigma": sigma, "L": h.L, "gap": gap,
                "dim": h.dim, "gamma": gamma}
    return runs, settings

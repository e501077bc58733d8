"""Localized noisy projected (stochastic) gradient descent for strongly convex finite sums.

The solver runs ``M`` rounds. Round ``m`` takes ``T_gd`` steps

    y <- Proj_{B(c_m, R_m)}[y - eta_t (grad h(y; B_t) + nu_t)],  eta_t = 1/(mu (t+1)),

starting from the round center ``c_m`` and returns the uniform average of the
pre-step iterates as the next center. Radii shrink by the recurrence in
``derive_inner_params``. Every step is a Gaussian mechanism of per-step
sensitivity ``2L/b``; the ``M * T_gd`` steps are amplified by subsampling
(when ``b < n``) and then composed by advanced composition to exactly the
requested ``(eps', delta')``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import kernels, streams
from .core import NumericalError, PreconditionError
from .privacy import (
    PrivacyLedger, calibrate_gaussian, invert_advanced_composition, invert_amplification,
)

DEFAULT_INNER_CONSTANTS = {
    "C_R": 1.0,       # radius recurrence multiplier (absorbs hidden log factors)
    "C_sigma": 1.0,   # multiplier on the calibrated noise variance; 0 turns noise off
    "T_cap": 10**6,   # cap on steps per round
    "M": None,        # explicit round count instead of the log-log rule
    "T_gd": None,     # explicit steps per round instead of min(n^2, T_cap)
}

# noise for this many steps (at most) is drawn at once
_CHUNK = 8192
_CHUNK_FLOATS = 1 << 22

# an epsilon that calibration accepts when the requested per-step value is >= 1
_EPS_STEP_MAX = 1.0 - 1e-9


class InnerWarning(UserWarning):
    pass


@dataclass(frozen=True)
class InnerParams:
    M: int
    T_gd: int
    sigma2_gd: float
    radii: tuple
    mu: float
    L: float
    n: int
    d_y: int
    eps_prime: float
    delta_prime: float
    b_in: int
    eps_step: float
    delta_step: float
    constants: dict = field(default_factory=dict)
    warnings: tuple = ()

    @property
    def steps(self) -> int:
        return self.M * self.T_gd

    def eta(self, t: int) -> float:
        return 1.0 / (self.mu * (t + 1))

    @property
    def private(self) -> bool:
        return self.sigma2_gd > 0

    def to_dict(self) -> dict:
        return {
            "M": self.M, "T_gd": self.T_gd, "sigma2_gd": self.sigma2_gd, "radii": list(self.radii),
            "mu": self.mu, "L": self.L, "n": self.n, "d_y": self.d_y, "eps_prime": self.eps_prime,
            "delta_prime": self.delta_prime, "b_in": self.b_in, "eps_step": self.eps_step,
            "delta_step": self.delta_step, "constants": dict(self.constants),
            "warnings": list(self.warnings),
        }


def rounds_for(mu: float, L: float, n: int, eps_prime: float) -> int:
    """``ceil(log2(ln(mu eps' n / L)))``, at least 1."""
    z = mu * eps_prime * n / L
    if z <= math.e:
        return 1
    return max(1, math.ceil(math.log2(math.log(z))))


def radius_recurrence(R0: float, M: int, mu: float, L: float, n: int, d_y: int,
                      eps_prime: float, C_R: float = 1.0) -> list[float]:
    """Radii ``R_0..R_{M-1}``; each step is clamped so radii never grow."""
    s = L / (mu * eps_prime * n)
    radii = [float(R0)]
    for _ in range(M - 1):
        r = radii[-1]
        radii.append(min(r, C_R * (math.sqrt(r * s) + s * math.sqrt(d_y))))
    return radii


def derive_inner_params(mu: float, L: float, n: int, d_y: int, eps_prime: float, delta_prime: float,
                        b_in: Optional[int] = None, R0: float = 1.0,
                        overrides: Optional[dict] = None) -> InnerParams:
    if not (mu > 0 and L > 0 and R0 > 0):
        raise ValueError("mu, L and R0 must be positive")
    if not (eps_prime > 0 and 0 < delta_prime < 1):
        raise ValueError("inner budget needs eps' > 0 and 0 < delta' < 1")
    b = n if b_in is None else int(b_in)
    if not 1 <= b <= n:
        raise ValueError(f"inner batch size {b} outside [1, {n}]")
    const = dict(DEFAULT_INNER_CONSTANTS)
    unknown = set(overrides or {}) - set(const)
    if unknown:
        raise ValueError(f"unknown inner constants: {sorted(unknown)}")
    const.update(overrides or {})
    notes = []

    if d_y >= 2:
        need = L * R0 ** (2.0 / math.log(d_y)) / (mu * eps_prime)
        if n < need:
            raise PreconditionError(
                f"sample-size condition n >= L R0^(2/ln d_y)/(mu eps') fails: n={n} < {need:.4g}"
            )
    else:
        notes.append("sample-size condition skipped for d_y = 1")

    M = int(const["M"]) if const["M"] else rounds_for(mu, L, n, eps_prime)
    if const["T_gd"]:
        T_gd = int(const["T_gd"])
    else:
        T_gd = min(n * n, int(const["T_cap"]))
        if T_gd < n * n:
            notes.append(f"steps per round capped at {T_gd} instead of n^2 = {n * n}")
    radii = radius_recurrence(R0, M, mu, L, n, d_y, eps_prime, const["C_R"])

    K = M * T_gd
    delta_step = delta_prime / (K + 1)
    eps_amp = invert_advanced_composition(eps_prime, delta_step, K)
    eps_step = eps_amp if b == n else invert_amplification(eps_amp, b, n)
    if eps_step >= 1:
        notes.append(f"per-step epsilon {eps_step:.4g} capped below 1 for Gaussian calibration")
        eps_step = _EPS_STEP_MAX
    sigma2 = const["C_sigma"] * calibrate_gaussian(2.0 * L / b, eps_step, delta_step)
    if const["C_sigma"] < 1:
        notes.append(f"C_sigma={const['C_sigma']} < 1: inner noise below the calibrated level, not private")
    for msg in notes:
        warnings.warn(msg, InnerWarning, stacklevel=2)
    return InnerParams(M, T_gd, float(sigma2), tuple(radii), float(mu), float(L), int(n), int(d_y),
                       float(eps_prime), float(delta_prime), b, float(eps_step), float(delta_step),
                       const, tuple(notes))


@dataclass
class InnerObjective:
    """Strongly convex finite sum ``h = (1/n) sum h_i`` over ``y``.

    Two forms are supported. The affine form has per-sample gradients
    ``hess @ y - offsets[i]`` and runs on the compiled kernel. The generic form
    calls ``grad(y, idx)`` returning the mean gradient over the index array
    ``idx`` (``None`` meaning all records).
    """

    n: int
    dim: int
    hess: Optional[np.ndarray] = None
    offsets: Optional[np.ndarray] = None
    grad: Optional[Callable[[np.ndarray, Optional[np.ndarray]], np.ndarray]] = None
    mean_offset: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.hess is None and self.grad is None:
            raise ValueError("objective needs an affine form or a gradient callback")
        if self.hess is not None:
            self.hess = np.ascontiguousarray(self.hess, dtype=float)
            if self.hess.shape != (self.dim, self.dim):
                raise ValueError("affine objective has inconsistent shapes")
            if self.offsets is not None:
                self.offsets = np.ascontiguousarray(np.atleast_2d(self.offsets), dtype=float)
                if self.offsets.shape != (self.n, self.dim):
                    raise ValueError("affine objective has inconsistent shapes")
                self.mean_offset = self.offsets.sum(axis=0) / self.n
            elif self.mean_offset is None:
                raise ValueError("affine objective needs per-sample offsets or their mean")
            self._mean_offset = np.asarray(self.mean_offset, dtype=float)

    @classmethod
    def affine(cls, hess, offsets) -> "InnerObjective":
        offsets = np.atleast_2d(np.asarray(offsets, float))
        return cls(offsets.shape[0], offsets.shape[1], hess=hess, offsets=offsets)

    @classmethod
    def affine_full_batch(cls, hess, mean_offset, n: int) -> "InnerObjective":
        """Affine full-batch gradient ``hess @ y - mean_offset``; mini-batches are unavailable."""
        mean_offset = np.asarray(mean_offset, float)
        return cls(n, mean_offset.size, hess=hess, mean_offset=mean_offset)

    @property
    def full_batch_only(self) -> bool:
        return self.hess is not None and self.offsets is None

    @property
    def is_affine(self) -> bool:
        return self.hess is not None

    def gradient(self, y, idx=None) -> np.ndarray:
        y = np.asarray(y, float)
        if self.is_affine:
            if idx is not None and self.full_batch_only:
                raise PreconditionError("this objective only provides full-batch gradients")
            c = self._mean_offset if idx is None else self.offsets[idx].sum(axis=0) / len(idx)
            return self.hess @ y - c
        return np.asarray(self.grad(y, idx), dtype=float)

    def minimizer(self) -> np.ndarray:
        """Exact unconstrained minimizer (affine form only)."""
        if not self.is_affine:
            raise PreconditionError("closed-form minimizer needs the affine form")
        return np.linalg.solve(self.hess, self._mean_offset)


@dataclass
class InnerResult:
    y: np.ndarray
    centers: list
    radii: tuple
    max_ball_ratio: float
    steps: int
    backend: str

    def to_dict(self) -> dict:
        return {"y": self.y.tolist(), "max_ball_ratio": self.max_ball_ratio,
                "radii": list(self.radii), "steps": self.steps, "backend": self.backend}


def _draws(params: InnerParams, noise_rng, batch_rng, k: int, d: int):
    noise = None
    if params.sigma2_gd > 0:
        noise = math.sqrt(params.sigma2_gd) * noise_rng.standard_normal((k, d))
    idx = None
    if params.b_in < params.n:
        idx = batch_rng.integers(0, params.n, size=(k, params.b_in))
    return noise, idx


def _chunk(params: InnerParams, d: int) -> int:
    per_step = d * (1 + (params.b_in if params.b_in < params.n else 0))
    return max(1, min(_CHUNK, _CHUNK_FLOATS // per_step))


def dp_loc_sgd(objective: InnerObjective, y0, params: InnerParams, rng: np.random.Generator,
               ledger: Optional[PrivacyLedger] = None, label: str = "inner",
               round_id: Optional[int] = None, backend=None) -> InnerResult:
    """Private localized SGD. Noise and batch indices come from two sub-streams of ``rng``.

    When ``ledger`` is given, the call records one entry worth ``(eps', delta')``.
    """
    y0 = np.array(y0, dtype=float)
    if y0.shape != (objective.dim,):
        raise ValueError(f"y0 has shape {y0.shape}, objective has dimension {objective.dim}")
    if params.n != objective.n:
        raise ValueError("inner parameters were derived for a different dataset size")
    if objective.full_batch_only and params.b_in < params.n:
        raise PreconditionError("mini-batch inner solves need per-sample offsets")
    round_kernel = kernels.affine_round if backend is None else backend
    noise_rng = streams.child(rng, 0)
    batch_rng = streams.child(rng, 1)
    d = objective.dim
    R0 = params.radii[0]
    center = y0.copy()
    centers = [center.copy()]
    worst = 0.0
    chunk = _chunk(params, d)
    etas_all = 1.0 / (params.mu * np.arange(1, params.T_gd + 1, dtype=float))
    for m in range(params.M):
        R = params.radii[m]
        y = center.copy()
        acc = np.zeros(d)
        work = np.empty(d)
        for start in range(0, params.T_gd, chunk):
            k = min(chunk, params.T_gd - start)
            noise, idx = _draws(params, noise_rng, batch_rng, k, d)
            etas = etas_all[start:start + k]
            if objective.is_affine:
                if idx is None:
                    drive = np.broadcast_to(-objective._mean_offset, (k, d)).copy()
                else:
                    drive = -objective.offsets[idx].sum(axis=1) / params.b_in
                if noise is not None:
                    drive += noise
                worst = max(worst, round_kernel(y, center, R, objective.hess,
                                                np.ascontiguousarray(drive), etas, acc, work))
            else:
                for j in range(k):
                    acc += y
                    g = objective.gradient(y, None if idx is None else idx[j])
                    if noise is not None:
                        g = g + noise[j]
                    step = y - etas[j] * g - center
                    r = float(np.linalg.norm(step))
                    if r > R:
                        step *= R / r
                    y = center + step
                    worst = max(worst, min(r / R, 1.0))
        new_center = acc / params.T_gd
        if not np.all(np.isfinite(new_center)):
            raise NumericalError(f"inner solver produced non-finite iterates in round {m}")
        # keep centers inside the initial ball, which contains the minimizer
        off = new_center - y0
        r = float(np.linalg.norm(off))
        if r > R0:
            new_center = y0 + off * (R0 / r)
        center = new_center
        centers.append(center.copy())
    if ledger is not None:
        record_inner_spend(ledger, params, label, round_id)
    backend_name = kernels.BACKEND if objective.is_affine and backend is None else "python"
    return InnerResult(center, centers, params.radii, worst, params.steps, backend_name)


def dp_loc_gd(objective: InnerObjective, y0, params: InnerParams, rng: np.random.Generator, **kw) -> InnerResult:
    """Full-batch variant: the stochastic solver with ``b_in = n``."""
    if params.b_in != params.n:
        raise ValueError("full-batch solver needs parameters derived with b_in = n")
    return dp_loc_sgd(objective, y0, params, rng, **kw)


def record_inner_spend(ledger: PrivacyLedger, params: InnerParams, label: str, round_id=None):
    if params.b_in < params.n:
        ledger.record(label, params.eps_step, params.delta_step, "amplified+advanced",
                      count=params.steps, round=round_id, b=params.b_in, n=params.n)
    else:
        ledger.record(label, params.eps_step, params.delta_step, "advanced",
                      count=params.steps, round=round_id)

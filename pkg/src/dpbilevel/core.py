"""Domain types and the per-sample oracle interface.

Per-sample gradient oracles are the primitive: every oracle takes ``(x, y,
points)`` where ``points`` is an ``(m, k)`` array of sample records and returns
an ``(m, d)`` array, one row per record. Full-batch and mini-batch gradients
are derived from them, so sensitivity reasoning has a single source of truth.

Reductions use ``numpy.sum`` along the sample axis. numpy sums float64 arrays
with a fixed-topology pairwise tree, so results are bit-reproducible for a
given dataset ordering.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Optional

import numpy as np

from .geometry import ConvexSet

Oracle = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]

GRADIENT_KINDS = ("xf", "yf", "xg", "yg")


class DimensionError(ValueError):
    """An oracle produced or received arrays of the wrong shape."""


class PreconditionError(ValueError):
    """A documented precondition of an operation does not hold."""


class NumericalError(FloatingPointError):
    """A solver produced non-finite values."""


@dataclass(frozen=True)
class Dataset:
    """Sample records ``xi_1..xi_n`` stored row-wise in a read-only array."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float, copy=True)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("dataset needs at least one record of uniform width")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def __len__(self):
        return self.n

    def replace(self, index: int, record) -> "Dataset":
        """Neighboring dataset with record ``index`` swapped for ``record``."""
        pts = np.array(self.points)
        pts[index] = np.asarray(record, dtype=float)
        return Dataset(pts)

    @classmethod
    def from_csv(cls, path, header: Optional[bool] = None) -> "Dataset":
        """Load one sample per row. A non-numeric first row is treated as a header."""
        path = Path(path)
        with path.open(newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
        if not rows:
            raise ValueError(f"{path}: no rows")
        if header is None:
            try:
                [float(c) for c in rows[0]]
                header = False
            except ValueError:
                header = True
        if header:
            rows = rows[1:]
        return cls(np.array([[float(c) for c in r] for r in rows]))

    def to_csv(self, path, header: Optional[list[str]] = None):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            if header:
                w.writerow(header)
            for row in self.points:
                w.writerow([repr(float(v)) for v in row])


@dataclass(frozen=True)
class ProblemConstants:
    """Declared regularity constants. ``ell`` and ``kappa`` are always derived."""

    L0f: float
    L1f: float
    L0g: float
    L1g: float
    L2g: float
    mu_g: float
    Delta_F: float

    def __post_init__(self):
        for name in ("L0f", "L1f", "L0g", "L1g", "mu_g", "Delta_F"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"constant {name} must be positive and finite, got {v}")
        # quadratic lower levels have an exactly zero Hessian-Lipschitz constant
        if not (self.L2g >= 0 and math.isfinite(self.L2g)):
            raise ValueError(f"constant L2g must be non-negative, got {self.L2g}")

    @property
    def ell(self) -> float:
        return max(self.L0f, self.L1f, self.L0g, self.L1g, self.L2g)

    @property
    def kappa(self) -> float:
        return self.ell / self.mu_g

    def to_dict(self) -> dict:
        return {
            "L0f": self.L0f, "L1f": self.L1f, "L0g": self.L0g, "L1g": self.L1g,
            "L2g": self.L2g, "mu_g": self.mu_g, "Delta_F": self.Delta_F,
            "ell": self.ell, "kappa": self.kappa,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ProblemConstants":
        keys = ("L0f", "L1f", "L0g", "L1g", "L2g", "mu_g", "Delta_F")
        missing = [k for k in keys if k not in d]
        if missing:
            raise ValueError(f"missing constants: {missing}")
        return cls(**{k: float(d[k]) for k in keys})


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class RunConfig:
    """Run-level knobs. ``overrides`` holds the multiplicative constants of every
    asymptotic assignment (see ``outer.DEFAULT_OUTER_CONSTANTS`` and
    ``inner.DEFAULT_INNER_CONSTANTS``)."""

    seed: int = 0
    gamma: float = 0.1
    alpha_target: Optional[float] = None
    b_in: Optional[int] = None
    b_out: Optional[int] = None
    clip: Optional[float] = None
    overrides: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.alpha_target is not None and not self.alpha_target > 0:
            raise ValueError("alpha_target must be positive")
        for name in ("b_in", "b_out"):
            b = getattr(self, name)
            if b is not None and b < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.clip is not None and not self.clip > 0:
            raise ValueError("clip must be positive")

    def check_batches(self, n: int):
        for name in ("b_in", "b_out"):
            b = getattr(self, name)
            if b is not None and b > n:
                raise ValueError(f"{name}={b} exceeds dataset size n={n}")


@dataclass(frozen=True)
class AffineInner:
    """Affine structure of the lower-level gradients in ``y`` at a fixed ``x``.

    The full-batch gradients are ``hess_f @ y - mean(offsets_f)`` and
    ``hess_g @ y - mean(offsets_g)``. When ``shared`` is true every record has
    the same Hessian, so each per-sample gradient is ``H @ y - offsets[i]`` and
    mini-batches stay affine too.
    """

    hess_f: np.ndarray
    offsets_f: np.ndarray
    hess_g: np.ndarray
    offsets_g: np.ndarray
    shared: bool = True


@dataclass(frozen=True)
class BilevelProblem:
    """Per-sample oracle bundle for ``min_x f(x, y*(x))``, ``y*(x) = argmin_y g(x, y)``.

    Second-order oracles ``hess_xy_g`` (shape ``(d_x, d_y)``) and ``hess_yy_g``
    return the mean Hessian over the given records and are used only by the
    verification oracles. ``references`` carries closed-form callables
    (``y_star``, ``y_lambda``, ``hypergradient``) for problems that have them.
    """

    name: str
    dim_x: int
    dim_y: int
    grad_x_f: Oracle
    grad_y_f: Oracle
    grad_x_g: Oracle
    grad_y_g: Oracle
    constants: ProblemConstants
    feasible_x: ConvexSet
    inner_domain_radius: float
    inner_center: Optional[np.ndarray] = None
    f: Optional[Oracle] = None
    g: Optional[Oracle] = None
    hess_xy_g: Optional[Callable] = None
    hess_yy_g: Optional[Callable] = None
    affine_inner: Optional[Callable[[np.ndarray, np.ndarray], AffineInner]] = None
    references: Mapping[str, Callable] = field(default_factory=dict)
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.feasible_x.dim != self.dim_x:
            raise DimensionError(
                f"feasible set has dimension {self.feasible_x.dim}, problem has dim_x={self.dim_x}"
            )
        if not self.inner_domain_radius > 0:
            raise ValueError("inner_domain_radius must be positive")
        c = self.constants
        if self.inner_domain_radius > c.L0g / c.mu_g * (1 + 1e-12):
            raise ValueError(
                "inner_domain_radius exceeds L0g/mu_g; the declared constants are inconsistent"
            )
        center = np.zeros(self.dim_y) if self.inner_center is None else np.asarray(self.inner_center, float)
        object.__setattr__(self, "inner_center", center)

    def oracle(self, which: str) -> Oracle:
        try:
            return {"xf": self.grad_x_f, "yf": self.grad_y_f,
                    "xg": self.grad_x_g, "yg": self.grad_y_g}[which]
        except KeyError:
            raise ValueError(f"unknown gradient kind {which!r}; expected one of {GRADIENT_KINDS}") from None

    def _out_dim(self, which: str) -> int:
        return self.dim_x if which[0] == "x" else self.dim_y

    def per_sample_gradients(self, which: str, x, y, points: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.shape != (self.dim_x,):
            raise DimensionError(f"grad_{which}: x has shape {x.shape}, expected ({self.dim_x},)")
        if y.shape != (self.dim_y,):
            raise DimensionError(f"grad_{which}: y has shape {y.shape}, expected ({self.dim_y},)")
        rows = np.asarray(self.oracle(which)(x, y, points), dtype=float)
        expected = (points.shape[0], self._out_dim(which))
        if rows.shape != expected:
            raise DimensionError(f"oracle grad_{which} returned shape {rows.shape}, expected {expected}")
        return rows

    def values(self, which: str, x, y, points: np.ndarray) -> np.ndarray:
        fn = self.f if which == "f" else self.g
        if fn is None:
            raise PreconditionError(f"problem {self.name!r} has no value oracle for {which}")
        return np.asarray(fn(np.asarray(x, float), np.asarray(y, float), points), dtype=float)


def full_batch_gradient(problem: BilevelProblem, which: str, x, y, dataset: Dataset) -> np.ndarray:
    """Mean of per-sample gradients over the whole dataset."""
    rows = problem.per_sample_gradients(which, x, y, dataset.points)
    return rows.sum(axis=0) / dataset.n


def minibatch_gradient(problem: BilevelProblem, which: str, x, y, dataset: Dataset, batch) -> np.ndarray:
    """Mean over the index multiset ``batch`` (duplicates count with multiplicity)."""
    idx = np.asarray(batch, dtype=np.intp).ravel()
    if idx.size == 0:
        raise ValueError("empty batch")
    if idx.min() < 0 or idx.max() >= dataset.n:
        raise IndexError(f"batch indices must lie in [0, {dataset.n})")
    rows = problem.per_sample_gradients(which, x, y, dataset.points[idx])
    return rows.sum(axis=0) / idx.size


def full_batch_value(problem: BilevelProblem, which: str, x, y, dataset: Dataset) -> float:
    return float(problem.values(which, x, y, dataset.points).sum() / dataset.n)


def load_manifest(path) -> dict:
    """Read a JSON problem manifest ``{"family", "params", "constants"?}``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    with path.open() as fh:
        manifest = json.load(fh)
    if "family" not in manifest:
        raise ValueError(f"{path}: manifest lacks 'family'")
    manifest.setdefault("params", {})
    return manifest

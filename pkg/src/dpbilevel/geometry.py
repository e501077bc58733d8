"""Closed convex sets with exact Euclidean projection, prox steps and gradient mappings."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

VARIANTS = ("whole_space", "ball", "box", "nonneg_orthant", "simplex")


def project_simplex(z: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Projection onto ``{u >= 0, sum(u) = scale}`` by the sort-and-threshold rule."""
    z = np.asarray(z, dtype=float)
    u = np.sort(z)[::-1]
    css = np.cumsum(u) - scale
    k = np.arange(1, z.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    tau = css[rho] / (rho + 1)
    return np.maximum(z - tau, 0.0)


@dataclass(frozen=True)
class ConvexSet:
    variant: str
    dim: int
    center: Optional[np.ndarray] = None
    radius: float = 1.0
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None
    scale: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown set variant {self.variant!r}")
        if self.dim < 1:
            raise ValueError("dimension must be >= 1")
        if self.variant == "ball":
            if not self.radius > 0:
                raise ValueError("ball radius must be positive")
            c = np.zeros(self.dim) if self.center is None else np.asarray(self.center, float)
            if c.shape != (self.dim,):
                raise ValueError("ball center has the wrong dimension")
            object.__setattr__(self, "center", c)
        if self.variant == "box":
            lo = np.broadcast_to(np.asarray(self.lo, float), (self.dim,)).copy()
            hi = np.broadcast_to(np.asarray(self.hi, float), (self.dim,)).copy()
            if np.any(lo > hi):
                raise ValueError("box needs lo <= hi componentwise")
            object.__setattr__(self, "lo", lo)
            object.__setattr__(self, "hi", hi)
        if self.variant == "simplex" and not self.scale > 0:
            raise ValueError("simplex scale must be positive")

    @classmethod
    def whole_space(cls, dim: int) -> "ConvexSet":
        return cls("whole_space", dim)

    @classmethod
    def ball(cls, center, radius: float) -> "ConvexSet":
        center = np.atleast_1d(np.asarray(center, float))
        return cls("ball", center.size, center=center, radius=float(radius))

    @classmethod
    def box(cls, lo, hi, dim: Optional[int] = None) -> "ConvexSet":
        if dim is None:
            dim = np.broadcast(np.atleast_1d(lo), np.atleast_1d(hi)).shape[0]
        return cls("box", dim, lo=lo, hi=hi)

    @classmethod
    def nonneg_orthant(cls, dim: int) -> "ConvexSet":
        return cls("nonneg_orthant", dim)

    @classmethod
    def simplex(cls, dim: int, scale: float = 1.0) -> "ConvexSet":
        return cls("simplex", dim, scale=float(scale))

    def _check(self, z):
        z = np.asarray(z, dtype=float)
        if z.shape != (self.dim,):
            raise ValueError(f"point has shape {z.shape}, set has dimension {self.dim}")
        return z

    def project(self, z) -> np.ndarray:
        z = self._check(z)
        v = self.variant
        if v == "whole_space":
            return z.copy()
        if v == "ball":
            d = z - self.center
            r = np.linalg.norm(d)
            if r <= self.radius:
                return z.copy()
            return self.center + d * (self.radius / r)
        if v == "box":
            return np.clip(z, self.lo, self.hi)
        if v == "nonneg_orthant":
            return np.maximum(z, 0.0)
        return project_simplex(z, self.scale)

    def contains(self, z, tol: float = 1e-10) -> bool:
        z = self._check(z)
        v = self.variant
        if v == "whole_space":
            return bool(np.all(np.isfinite(z)))
        if v == "ball":
            return bool(np.linalg.norm(z - self.center) <= self.radius * (1 + tol) + tol)
        if v == "box":
            return bool(np.all(z >= self.lo - tol) and np.all(z <= self.hi + tol))
        if v == "nonneg_orthant":
            return bool(np.all(z >= -tol))
        return bool(np.all(z >= -tol) and abs(z.sum() - self.scale) <= tol * max(1.0, self.scale))

    def prox_step(self, x, v, eta: float) -> np.ndarray:
        """argmin over the set of <v, u> + ||u - x||^2 / (2 eta), i.e. project(x - eta v)."""
        if not eta > 0:
            raise ValueError("eta must be positive")
        return self.project(self._check(x) - eta * np.asarray(v, dtype=float))

    def gradient_mapping(self, x, v, eta: float) -> np.ndarray:
        x = self._check(x)
        if not self.contains(x):
            raise ValueError("gradient mapping is defined only at points of the set")
        if self.variant == "whole_space":
            return np.array(v, dtype=float)
        return (x - self.prox_step(x, v, eta)) / eta

    def to_dict(self) -> dict:
        d = {"variant": self.variant, "dim": self.dim}
        if self.variant == "ball":
            d.update(center=self.center.tolist(), radius=self.radius)
        elif self.variant == "box":
            d.update(lo=self.lo.tolist(), hi=self.hi.tolist())
        elif self.variant == "simplex":
            d.update(scale=self.scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ConvexSet":
        v = d["variant"]
        if v == "ball":
            return cls.ball(d.get("center", np.zeros(d["dim"])), d["radius"])
        if v == "box":
            return cls.box(d["lo"], d["hi"], d.get("dim"))
        if v == "simplex":
            return cls.simplex(d["dim"], d.get("scale", 1.0))
        return cls(v, int(d["dim"]))

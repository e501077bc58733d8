"""Gaussian mechanism, composition and subsampling arithmetic, and the spend ledger.

All quantities use the exact closed forms below, never asymptotic shorthands.

* Gaussian mechanism: ``sigma^2 = 2 ln(1.25/delta) S^2 / eps^2``, valid for
  ``eps, delta in (0, 1)``.
* Advanced composition of ``T`` mechanisms that are each ``(eps0, delta0)``-DP:
  ``eps = sqrt(2 T ln(1/delta0)) eps0 + 2 T eps0^2`` and ``delta = (T + 1) delta0``.
* Subsampling ``b`` of ``n`` records with replacement:
  ``eps = ln(1 + (1 - (1 - 1/n)^b)(e^eps0 - 1))``, ``delta`` unchanged.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import PrivacyBudget

RULES = ("basic", "advanced", "amplified+advanced")


class BudgetExceededError(RuntimeError):
    """The ledger total passed the configured hard budget."""


@dataclass(frozen=True)
class Spend:
    """An ``(epsilon, delta)`` pair that may be zero, unlike ``PrivacyBudget``."""

    epsilon: float
    delta: float

    def __add__(self, other: "Spend") -> "Spend":
        return Spend(self.epsilon + other.epsilon, self.delta + other.delta)

    def within(self, budget) -> bool:
        return self.epsilon <= budget.epsilon and self.delta <= budget.delta


ZERO = Spend(0.0, 0.0)


@dataclass(frozen=True)
class GaussianMechanismParams:
    sensitivity: float
    sigma2: float
    epsilon: float
    delta: float


def calibrate_gaussian(sensitivity: float, epsilon: float, delta: float) -> float:
    """Smallest noise variance making the Gaussian mechanism ``(epsilon, delta)``-DP."""
    if not sensitivity > 0:
        raise ValueError(f"sensitivity must be positive, got {sensitivity}")
    if not 0 < epsilon < 1:
        raise ValueError(f"Gaussian calibration needs 0 < epsilon < 1, got {epsilon}")
    if not 0 < delta < 1:
        raise ValueError(f"Gaussian calibration needs 0 < delta < 1, got {delta}")
    return 2.0 * math.log(1.25 / delta) * sensitivity**2 / epsilon**2


def gaussian_mechanism(sensitivity: float, epsilon: float, delta: float) -> GaussianMechanismParams:
    return GaussianMechanismParams(sensitivity, calibrate_gaussian(sensitivity, epsilon, delta), epsilon, delta)


def add_gaussian_noise(v, sigma2: float, rng: np.random.Generator) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if sigma2 < 0:
        raise ValueError("sigma2 must be non-negative")
    if sigma2 == 0:
        return v.copy()
    return v + math.sqrt(sigma2) * rng.standard_normal(v.shape)


def advanced_composition(epsilon0: float, delta0: float, T: int) -> Spend:
    if not 0 <= epsilon0 < 1:
        raise ValueError(f"advanced composition needs 0 <= epsilon0 < 1, got {epsilon0}")
    if not 0 < delta0 < 1:
        raise ValueError(f"advanced composition needs 0 < delta0 < 1, got {delta0}")
    if T < 1:
        raise ValueError("T must be >= 1")
    if epsilon0 == 0:
        # ln(1/delta0) overflows for subnormal delta0; zero base spend composes to zero
        return Spend(0.0, (T + 1) * delta0)
    eps = math.sqrt(2.0 * T * -math.log(delta0)) * epsilon0 + 2.0 * T * epsilon0**2
    return Spend(eps, (T + 1) * delta0)


def sampling_probability(b: int, n: int) -> float:
    """Chance that a given record appears in ``b`` draws with replacement from ``n``."""
    if not 1 <= b <= n:
        raise ValueError(f"need 1 <= b <= n, got b={b}, n={n}")
    return -math.expm1(b * math.log1p(-1.0 / n)) if n > 1 else 1.0


def amplify_by_subsampling(epsilon0: float, delta0: float, b: int, n: int) -> Spend:
    if epsilon0 < 0:
        raise ValueError("epsilon0 must be non-negative")
    q = sampling_probability(b, n)
    return Spend(math.log1p(q * math.expm1(epsilon0)), delta0)


def invert_advanced_composition(epsilon: float, delta0: float, T: int) -> float:
    """Per-mechanism ``eps0`` whose ``T``-fold advanced composition is exactly ``epsilon``."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    a = 2.0 * T
    bq = math.sqrt(2.0 * T * math.log(1.0 / delta0))
    # positive root of a x^2 + bq x - epsilon = 0, written to avoid cancellation
    return 2.0 * epsilon / (bq + math.sqrt(bq * bq + 4.0 * a * epsilon))


def invert_amplification(epsilon: float, b: int, n: int) -> float:
    """Base ``eps0`` that subsampling ``b`` of ``n`` maps to ``epsilon``."""
    q = sampling_probability(b, n)
    return math.log1p(math.expm1(epsilon) / q)


@dataclass(frozen=True)
class LedgerEntry:
    """One recorded spend.

    ``epsilon``/``delta`` are the per-mechanism parameters. ``count`` repeats the
    mechanism. When ``b`` and ``n`` are set the mechanism ran on a subsample and
    is amplified before any composition. Entries sharing a label inside the same
    round form one pool; an advanced pool composes with ``eps0 = max``,
    ``delta0 = max`` and ``K = sum(count)``.
    """

    label: str
    epsilon: float
    delta: float
    rule: str = "basic"
    count: int = 1
    round: Optional[int] = None
    b: Optional[int] = None
    n: Optional[int] = None

    def base(self) -> Spend:
        if self.b is not None:
            return amplify_by_subsampling(self.epsilon, self.delta, self.b, self.n)
        return Spend(self.epsilon, self.delta)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("label", "epsilon", "delta", "rule", "count", "round", "b", "n")}


def _compose_pool(entries: list[LedgerEntry]) -> Spend:
    rule = entries[0].rule
    bases = [e.base() for e in entries]
    basic = Spend(sum(s.epsilon * e.count for s, e in zip(bases, entries)),
                  sum(s.delta * e.count for s, e in zip(bases, entries)))
    if rule == "basic":
        return basic
    return _tighter(max(s.epsilon for s in bases), max(s.delta for s in bases),
                    sum(e.count for e in entries), basic)


def _tighter(eps0: float, d0: float, k: int, basic: Spend) -> Spend:
    """Smaller of the advanced and basic epsilons, paired with the larger delta.

    Either bound stays valid with a larger delta. Always reporting
    ``max(sum delta_i, (k + 1) delta0)`` keeps the total delta monotone when the
    smaller epsilon switches sides or advanced composition stops applying.
    """
    delta = max(basic.delta, (k + 1) * d0)
    if eps0 < 1 and d0 > 0:
        return Spend(min(advanced_composition(eps0, d0, k).epsilon, basic.epsilon), delta)
    return Spend(basic.epsilon, delta)


def _compose_scope(entries: list[LedgerEntry]) -> Spend:
    pools: dict[tuple, list[LedgerEntry]] = {}
    for e in entries:
        pools.setdefault((e.label, e.rule), []).append(e)
    total = ZERO
    for pool in pools.values():
        total = total + _compose_pool(pool)
    return total


@dataclass
class PrivacyLedger:
    """Ordered spend record whose total is recomputed from the entries on every query.

    Entries without a round compose within their own pool and add up. Entries
    tagged with a round id add up within the round; the rounds then compose
    with each other by ``round_rule`` ("advanced" or "basic").
    """

    entries: list = field(default_factory=list)
    round_rule: str = "advanced"
    hard_budget: Optional[PrivacyBudget] = None

    def __post_init__(self):
        # per-round spends keyed by the exact entries they were computed from
        self._cache: dict[int, tuple[tuple, Spend]] = {}

    def round_spends(self) -> dict[int, Spend]:
        rounds: dict[int, list[LedgerEntry]] = {}
        for e in self.entries:
            if e.round is not None:
                rounds.setdefault(e.round, []).append(e)
        out = {}
        for r in sorted(rounds):
            key = tuple(rounds[r])
            hit = self._cache.get(r)
            if hit is None or hit[0] != key:
                hit = (key, _compose_scope(rounds[r]))
                self._cache[r] = hit
            out[r] = hit[1]
        return out

    @property
    def total(self) -> Spend:
        loose = _compose_scope([e for e in self.entries if e.round is None])
        rounds = list(self.round_spends().values())
        if not rounds:
            return loose
        eps0 = max(s.epsilon for s in rounds)
        d0 = max(s.delta for s in rounds)
        composed = Spend(sum(s.epsilon for s in rounds), sum(s.delta for s in rounds))
        if self.round_rule == "advanced":
            composed = _tighter(eps0, d0, len(rounds), composed)
        return loose + composed

    def record(self, label: str, epsilon: float, delta: float, rule: str = "basic", *,
               count: int = 1, round: Optional[int] = None, b: Optional[int] = None,
               n: Optional[int] = None) -> "PrivacyLedger":
        if rule not in RULES:
            raise ValueError(f"unknown composition rule {rule!r}; expected one of {RULES}")
        if epsilon < 0 or delta < 0:
            raise ValueError("spend must be non-negative")
        if rule == "amplified+advanced" and (b is None or n is None):
            raise ValueError("amplified+advanced entries need the batch size b and dataset size n")
        if count < 1:
            raise ValueError("count must be >= 1")
        self.entries.append(LedgerEntry(label, float(epsilon), float(delta), rule, int(count), round, b, n))
        if self.hard_budget is not None:
            t = self.total
            if not t.within(self.hard_budget):
                raise BudgetExceededError(
                    f"privacy spend ({t.epsilon:.6g}, {t.delta:.6g}) exceeds budget "
                    f"({self.hard_budget.epsilon}, {self.hard_budget.delta}) after entry {label!r}"
                )
        return self

    def to_dict(self) -> dict:
        t = self.total
        return {
            "round_rule": self.round_rule,
            "entries": [e.to_dict() for e in self.entries],
            "total": {"epsilon": t.epsilon, "delta": t.delta},
            "budget": None if self.hard_budget is None else
            {"epsilon": self.hard_budget.epsilon, "delta": self.hard_budget.delta},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def ledger_record(ledger: PrivacyLedger, label: str, epsilon_i: float, delta_i: float, rule: str,
                  **kw) -> PrivacyLedger:
    return ledger.record(label, epsilon_i, delta_i, rule, **kw)


def split_outer_budget(budget: PrivacyBudget, T: int) -> tuple[float, float]:
    """Per-mechanism ``(eps, delta)`` for the three mechanisms of each outer iteration.

    Each iteration runs three mechanisms at ``(e/sqrt(18T), d/(3(T+1)))`` which
    basic-compose to ``(e/sqrt(2T), d/(T+1))``. Composing ``T`` such iterations
    with advanced composition costs ``e sqrt(ln((T+1)/d)) + e^2``, so ``e`` is
    the working epsilon solving that expression equal to the budget, shrunk by a
    relative 1e-12 (and ``d`` likewise) to absorb rounding.
    """
    shrink = 1.0 - 1e-12
    d = budget.delta * shrink
    per_round = invert_advanced_composition(budget.epsilon, d / (T + 1), T) * shrink
    e = per_round * math.sqrt(2.0 * T)
    return e / math.sqrt(18.0 * T), d / (3.0 * (T + 1))

"""Closed-form separation rates, regime classification and resolution choice.

All asymptotic equivalences are evaluated with constant one and without
logarithmic factors. The rate has the shape

    rho^2 = A + min(B, C + D)

with the unconstrained term ``A``, a high-budget term ``B`` that depends on
the randomness mode, a low-budget term ``C`` and the pure privacy term
``D``. Regimes 1-6 label the dominant term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

from .sequence_model import ModelConfig

__all__ = [
    "RateTerms",
    "rate_terms",
    "separation_rate_shared",
    "separation_rate_local",
    "separation_rate",
    "RegimeReport",
    "regime_expression",
    "regime_epsilon_exponent",
    "classify_regime",
    "case_list_regime",
    "optimal_resolution",
    "RateRow",
    "rate_curve",
]


@dataclass(frozen=True)
class RateTerms:
    """The four terms of the rate formula for one configuration."""

    unconstrained: float
    high_budget: float
    low_budget: float
    privacy: float

    @property
    def value(self) -> float:
        return self.unconstrained + min(self.high_budget, self.low_budget + self.privacy)


def rate_terms(cfg: ModelConfig, shared: bool) -> RateTerms:
    """Evaluate the four rate terms for the chosen randomness mode."""
    m, n, s, eps = cfg.m, cfg.n, cfg.s, cfg.epsilon
    var = cfg.sigma**2
    budget = min(1.0, n * eps * eps)
    unconstrained = (var / (m * n)) ** (2 * s / (2 * s + 0.5))
    if shared:
        high = (var / (m * n**1.5 * eps * math.sqrt(budget))) ** (2 * s / (2 * s + 1))
    else:
        high = (var / (m * n**2 * eps**2)) ** (2 * s / (2 * s + 1.5))
    low = (var / (math.sqrt(m) * n * math.sqrt(budget))) ** (2 * s / (2 * s + 0.5))
    privacy = var / (m * n**2 * eps**2)
    return RateTerms(unconstrained, high, low, privacy)


def separation_rate_shared(cfg: ModelConfig) -> float:
    """Squared separation rate for protocols with shared randomness."""
    return rate_terms(cfg, True).value


def separation_rate_local(cfg: ModelConfig) -> float:
    """Squared separation rate for protocols with local randomness only."""
    return rate_terms(cfg, False).value


def separation_rate(cfg: ModelConfig, shared: bool) -> float:
    return rate_terms(cfg, shared).value


_TAGS = {
    1: "unconstrained",
    2: "high-budget",
    3: "high-budget",
    4: "low-budget",
    5: "low-budget",
    6: "privacy",
}


@dataclass(frozen=True)
class RegimeReport:
    """Dominant term of the rate formula.

    Attributes:
        regime_id: 1..6.
        dominant_term: which formula term dominates.
        rho_squared: value of the full rate formula.
        shared: randomness mode.
        branch_value: the regime's own closed-form expression.
        term_value: the same term as evaluated inside the rate formula.
    """

    regime_id: int
    dominant_term: str
    rho_squared: float
    shared: bool
    branch_value: float
    term_value: float


def regime_expression(regime_id: int, cfg: ModelConfig, shared: bool) -> float:
    """Per-regime rate expression written directly from the regime table."""
    m, n, s, eps, var = cfg.m, cfg.n, cfg.s, cfg.epsilon, cfg.sigma**2
    if regime_id == 1:
        return (var / (m * n)) ** (2 * s / (2 * s + 0.5))
    if regime_id in (2, 3) and not shared:
        return (var / (m * n**2 * eps**2)) ** (2 * s / (2 * s + 1.5))
    if regime_id == 2:
        return (var / (m * n**1.5 * eps)) ** (2 * s / (2 * s + 1))
    if regime_id == 3:
        return (var / (m * n**2 * eps**2)) ** (2 * s / (2 * s + 1))
    if regime_id == 4:
        return (var / (math.sqrt(m) * n)) ** (2 * s / (2 * s + 0.5))
    if regime_id == 5:
        return (var / (math.sqrt(m) * n**1.5 * eps)) ** (2 * s / (2 * s + 0.5))
    if regime_id == 6:
        return var / (m * n**2 * eps**2)
    raise ValueError(f"regime_id must be 1..6, got {regime_id}")


def regime_epsilon_exponent(regime_id: int, s: float, shared: bool) -> float:
    """Exponent ``a`` with ``rho`` proportional to ``eps**a`` inside a regime."""
    if regime_id in (1, 4):
        return 0.0
    if regime_id in (2, 3) and not shared:
        return -2 * s / (2 * s + 1.5)
    if regime_id == 2:
        return -s / (2 * s + 1)
    if regime_id == 3:
        return -2 * s / (2 * s + 1)
    if regime_id == 5:
        return -s / (2 * s + 0.5)
    if regime_id == 6:
        return -1.0
    raise ValueError(f"regime_id must be 1..6, got {regime_id}")


def classify_regime(cfg: ModelConfig, shared: bool) -> RegimeReport:
    """Identify the dominant term; ties go to the lower regime id.

    Without shared randomness and ``s <= 1/4`` only the low-budget regimes
    4-6 are reported.
    """
    t = rate_terms(cfg, shared)
    small_budget = cfg.n * cfg.epsilon**2 < 1.0
    collapse = (not shared) and cfg.s <= 0.25
    if not collapse and t.unconstrained >= min(t.high_budget, t.low_budget + t.privacy):
        rid, term = 1, t.unconstrained
    elif not collapse and t.high_budget <= t.low_budget + t.privacy:
        rid, term = (3 if small_budget else 2), t.high_budget
    elif t.low_budget >= t.privacy:
        rid, term = (5 if small_budget else 4), t.low_budget
    else:
        rid, term = 6, t.privacy
    return RegimeReport(rid, _TAGS[rid], t.value, shared, regime_expression(rid, cfg, shared), term)


def case_list_regime(cfg: ModelConfig, shared: bool) -> int:
    """Regime from the explicit epsilon thresholds of the case lists.

    Independent of :func:`classify_regime`; the two agree away from regime
    boundaries, where the constant-free comparisons coincide. Thresholds are
    compared on the log scale since their exponents blow up near ``s = 1/4``.
    """
    lm, ln_, s = math.log(cfg.m), math.log(cfg.n), cfg.s
    lsig, leps = math.log(cfg.sigma), math.log(cfg.epsilon)
    root_n = -0.5 * ln_
    top = (-2 * lsig + lm + (0.5 - 2 * s) * ln_) / (4 * s + 1)
    tail = lsig / (2 * s + 1) - 0.5 * lm - (1 + s) / (2 * s + 1) * ln_
    if shared:
        mid = (-2 * lsig - 2 * s * lm + (0.5 - 2 * s) * ln_) / (4 * s + 1)
        low_mid = -lsig / (2 * s) - 0.5 * lm + (1 - 2 * s) / (4 * s) * ln_
    elif s > 0.25:
        mid = (-2 * lsig + (0.25 - s) * lm + (0.5 - 2 * s) * ln_) / (4 * s + 1)
        low_mid = (-4 * lsig + (2.5 - 2 * s) * ln_) / (4 * s - 1) - 0.5 * lm
    else:
        if leps >= root_n:
            return 4
        lower = 2 * lsig / (4 * s + 1) - 0.5 * lm - (1 + s) / (2 * s + 1) * ln_
        return 5 if leps >= lower else 6
    if leps >= top:
        return 1
    if leps >= root_n:
        return 2 if leps >= mid else 4
    if leps >= low_mid:
        return 3
    return 5 if leps >= tail else 6


def optimal_resolution(cfg: ModelConfig, shared: bool) -> int:
    """``max(floor(log2(1 / rho_s) / s), 1)`` with ``rho_s`` from the rate formula."""
    rho = math.sqrt(separation_rate(cfg, shared))
    if rho >= 1.0:
        return 1
    return max(int(math.floor(math.log2(1.0 / rho) / cfg.s + 1e-12)), 1)


@dataclass(frozen=True)
class RateRow:
    epsilon: float
    rho2: float
    regime_id: int
    shared: bool


def rate_curve(cfg_base: ModelConfig, eps_grid: Iterable[float], shared: bool) -> list[RateRow]:
    """Rate and regime at every epsilon of ``eps_grid``."""
    rows = []
    for eps in eps_grid:
        cfg = cfg_base.with_(epsilon=float(eps))
        rep = classify_regime(cfg, shared)
        rows.append(RateRow(float(eps), rep.rho_squared, rep.regime_id, shared))
    return rows

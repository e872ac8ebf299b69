"""Clipping, the Gaussian mechanism, budget arithmetic and membership audits.

Releases use the unit-variance Gaussian mechanism: a statistic with
sensitivity ``Delta`` is multiplied by a scale ``gamma`` and standard normal
noise is added. A release whose scaled sensitivity satisfies
``gamma * Delta <= eps / sqrt(2 ln(2/delta))`` is treated as
``(eps, delta)``-private, and a vector of such releases is accounted for
through the L2 norm of its scaled sensitivities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import _kernels
from .sequence_model import dimension

__all__ = [
    "clip",
    "PrivacyBudget",
    "MechanismRecord",
    "gaussian_scale",
    "gaussian_release",
    "release_scaled",
    "gamma_procedure_I",
    "gamma_procedure_II",
    "gamma_procedure_III",
    "gamma_adaptive_I",
    "gamma_adaptive_II",
    "gamma_adaptive_III",
    "lipschitz_constant",
    "subset_size_limit",
    "membership_slack",
    "check_set_B",
    "check_set_A_sampled",
    "composed_epsilon",
]


def clip(x, a: float, b: float):
    """Project ``x`` (scalar or array) onto ``[a, b]``."""
    if not a < b:
        raise ValueError(f"clip needs a < b, got a={a!r}, b={b!r}")
    if np.ndim(x) == 0:
        return b if x > b else (a if x < a else x)
    return np.clip(x, a, b)


@dataclass(frozen=True)
class PrivacyBudget:
    """Privacy budget shared by ``components`` Gaussian releases.

    Each release is charged ``(epsilon / sqrt(components), delta)``.
    """

    epsilon: float
    delta: float
    components: int = 1

    def __post_init__(self) -> None:
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 <= self.delta < 1.0:
            raise ValueError("delta must lie in [0, 1)")
        if int(self.components) != self.components or self.components < 1:
            raise ValueError("components must be a positive integer")

    @property
    def per_component_epsilon(self) -> float:
        return self.epsilon / math.sqrt(self.components)


@dataclass(frozen=True)
class MechanismRecord:
    """Audit trail of one Gaussian release.

    Attributes:
        sensitivity: bound on the change of the raw statistic between neighbours.
        scale_gamma: multiplier applied before noise is added.
        components: number of releases the budget was split over.
        epsilon: budget the scale was derived from.
        delta: delta the scale was derived from.
        noise_std: standard deviation of the added noise.
    """

    sensitivity: float
    scale_gamma: float
    components: float
    epsilon: float
    delta: float
    noise_std: float = 1.0

    @property
    def scaled_sensitivity(self) -> float:
        return self.scale_gamma * self.sensitivity

    def as_row(self) -> dict[str, float]:
        return {
            "sensitivity": self.sensitivity,
            "gamma": self.scale_gamma,
            "components": self.components,
        }


def _log_term(delta: float, numerator: float = 2.0) -> float:
    if not 0.0 < delta < 1.0:
        raise ValueError("the Gaussian mechanism needs delta in (0, 1)")
    return math.log(numerator / delta)


def gaussian_scale(epsilon: float, delta: float, sensitivity: float, components: float = 1) -> float:
    """``epsilon / (sensitivity * sqrt(2 * components * ln(2/delta)))``."""
    if not sensitivity > 0:
        raise ValueError("sensitivity must be positive")
    return epsilon / (sensitivity * math.sqrt(2.0 * components * _log_term(delta)))


def release_scaled(value, record: MechanismRecord, rng: np.random.Generator):
    """Return ``gamma * value + W`` with ``W`` standard normal, shaped like ``value``."""
    noise = rng.standard_normal(np.shape(value))
    out = record.scale_gamma * np.asarray(value, dtype=np.float64) + record.noise_std * noise
    return float(out) if np.ndim(value) == 0 else out


def gaussian_release(
    value: float, sensitivity: float, budget: PrivacyBudget, rng: np.random.Generator
) -> tuple[float, MechanismRecord]:
    """Release ``value`` through the Gaussian mechanism.

    :raises ValueError: if ``budget.delta == 0`` or ``sensitivity <= 0``
    """
    gamma = gaussian_scale(budget.epsilon, budget.delta, sensitivity, budget.components)
    record = MechanismRecord(
        sensitivity=float(sensitivity),
        scale_gamma=gamma,
        components=budget.components,
        epsilon=budget.epsilon,
        delta=budget.delta,
    )
    return release_scaled(value, record, rng), record


# Scale factors used by each procedure. They are kept verbatim per call site;
# the adaptive ones use ln(4/delta) and an extra factor of two.


def gamma_procedure_I(epsilon: float, delta: float, lipschitz: float, n_thresholds: int) -> float:
    """Scale of the clipped chi-square releases: ``eps / (D sqrt(2 |T| ln(2/delta)))``."""
    return epsilon / (lipschitz * math.sqrt(2.0 * n_thresholds * _log_term(delta)))


def gamma_procedure_II(epsilon: float, delta: float, coords: int, tau: float) -> float:
    """Scale of coordinate-split releases: ``eps / (2 sqrt(2 K ln(2/delta)) tau)``."""
    return epsilon / (2.0 * math.sqrt(2.0 * coords * _log_term(delta)) * tau)


def gamma_procedure_III(epsilon: float, delta: float, coords: int, tau: float, N: int) -> float:
    """Scale of rotated releases: ``eps / (2 sqrt(2 K ln(2/delta) ln N) tau)``."""
    return epsilon / (2.0 * math.sqrt(2.0 * coords * _log_term(delta) * math.log(N)) * tau)


def gamma_adaptive_I(
    epsilon: float, delta: float, lipschitz: float, n_thresholds: int, grid_count: int
) -> float:
    """``eps / (2 D sqrt(|T| |S'| ln(4/delta)))``."""
    return epsilon / (
        2.0 * lipschitz * math.sqrt(n_thresholds * grid_count * _log_term(delta, 4.0))
    )


def gamma_adaptive_II(
    epsilon: float, delta: float, coords: int, tau: float, high_count: int
) -> float:
    """``eps / (4 sqrt(|S_high| K ln(4/delta)) tau)``."""
    return epsilon / (4.0 * math.sqrt(high_count * coords * _log_term(delta, 4.0)) * tau)


def gamma_adaptive_III(
    epsilon: float, delta: float, coords: int, tau: float, high_count: int, N: int
) -> float:
    """``eps / (4 sqrt(K |S_high| ln(4/delta) ln N) tau)``."""
    return epsilon / (
        4.0 * math.sqrt(coords * high_count * _log_term(delta, 4.0) * math.log(N)) * tau
    )


def lipschitz_constant(n: int, L: int, tau: float, N: int, kappa_tilde: float = 1.0) -> float:
    """Hamming Lipschitz constant of the clipped chi-square statistic.

    ``kappa_tilde * ln(N) * max(sqrt(n sqrt(d) tau), sqrt(n d)) / (n sqrt(d))``
    with ``d = d_L``.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    d = dimension(L)
    root_d = math.sqrt(d)
    return kappa_tilde * math.log(N) * max(math.sqrt(n * root_d * tau), math.sqrt(n * d)) / (
        n * root_d
    )


def subset_size_limit(tau: float, lipschitz: float) -> int:
    """Largest subset size audited for the norm inequality, ``ceil(2 tau / D)``."""
    return int(math.ceil(2.0 * tau / lipschitz))


def membership_slack(n: int, L: int, lipschitz: float) -> float:
    """Per-member slack ``D n sqrt(d_L) / 8`` of both membership inequalities."""
    return lipschitz * n * math.sqrt(dimension(L)) / 8.0


def check_set_B(
    block: np.ndarray, L: int, tau: float, sigma: float, *, N: int | None = None,
    kappa_tilde: float = 1.0,
) -> bool:
    """Whether every observation is nearly orthogonal to the sum of the others.

    :param block: one server's ``(n, d_L)`` observations
    :param N: total sample size used in the Lipschitz constant (defaults to ``n``)
    """
    x = np.asarray(block, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ValueError("the orthogonality audit needs at least two observations")
    D = lipschitz_constant(n, L, tau, N or n, kappa_tilde)
    worst = _kernels.max_leave_one_out_inner(x / sigma)
    return worst <= membership_slack(n, L, D)


def check_set_A_sampled(
    block: np.ndarray, L: int, tau: float, sigma: float, subset_budget: int,
    rng: np.random.Generator, *, N: int | None = None, kappa_tilde: float = 1.0,
) -> bool:
    """Sampled audit of the subset-norm inequality.

    All singletons are checked exactly, then ``subset_budget`` random subsets
    with sizes drawn uniformly from ``2..min(K_tau, n)``. A ``True`` verdict
    is therefore not exhaustive.
    """
    x = np.asarray(block, dtype=np.float64) / sigma
    n = x.shape[0]
    if subset_budget < n:
        raise ValueError("subset_budget must be at least the number of observations")
    D = lipschitz_constant(n, L, tau, N or n, kappa_tilde)
    slack = membership_slack(n, L, D)
    members = [np.arange(n)]
    offsets = [np.arange(n + 1)]
    k_max = min(subset_size_limit(tau, D), n)
    if k_max >= 2:
        sizes = rng.integers(2, k_max + 1, size=subset_budget)
        picks = [rng.choice(n, size=int(k), replace=False) for k in sizes]
        members.append(np.concatenate(picks))
        offsets.append(n + np.cumsum(sizes))
    flat = np.concatenate(members)
    offs = np.concatenate(offsets)
    return _kernels.subset_norm_excess(x, flat, offs, slack) <= 0.0


def composed_epsilon(records: Iterable[MechanismRecord], delta: float) -> float:
    """Privacy level of a set of Gaussian releases viewed as one vector release.

    ``sqrt(2 ln(2/delta)) * || (gamma_i Delta_i)_i ||_2``.
    """
    total = sum(r.scaled_sensitivity**2 for r in records)
    return math.sqrt(2.0 * _log_term(delta) * total)


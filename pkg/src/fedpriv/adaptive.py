"""Smoothness-adaptive tests.

The smoothness is unknown within ``[s_min, s_max]``. A mesh of candidate
smoothness values gives a grid of resolution levels, split into a low set
(small budgets, handled by procedure I) and a high set (handled by
procedure II without shared randomness, III with it). The two halves
split the privacy budget, so their combined release stays within
``(eps, delta)``. The final test rejects when either half rejects, with the
level split evenly over the non-empty halves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .privacy import (
    MechanismRecord,
    composed_epsilon,
    gamma_adaptive_I,
    gamma_adaptive_II,
    gamma_adaptive_III,
)
from .procedures import (
    ProcedureI,
    ProcedureII,
    ProcedureIII,
    SharedRandomness,
    bonferroni_scale,
    clip_level,
    coordinate_budget,
    empirical_critical_value,
    haar_rotation,
    null_statistics,
    partition_servers,
)
from .procedures import _test_III_statistic
from .rates import optimal_resolution
from .sequence_model import DistributedData, ModelConfig, dimension

__all__ = [
    "ResolutionGrid",
    "smoothness_mesh",
    "resolution_grid",
    "partition_grid",
    "AdaptiveCalibration",
    "AdaptiveOutcome",
    "AdaptiveProcedure",
    "calibrate_adaptive",
    "adaptive_test_local",
    "adaptive_test_shared",
]


@dataclass(frozen=True)
class ResolutionGrid:
    """Candidate resolution levels and their budget partition.

    Attributes:
        levels: sorted distinct levels.
        s_min, s_max: smoothness range the grid covers.
        low_set, high_set: partition of ``levels``.
        shared: randomness mode used for the rates and the partition.
    """

    levels: tuple[int, ...]
    s_min: float
    s_max: float
    low_set: tuple[int, ...]
    high_set: tuple[int, ...]
    shared: bool

    def __post_init__(self) -> None:
        if set(self.low_set) & set(self.high_set):
            raise ValueError("low and high sets must be disjoint")
        if tuple(sorted(set(self.low_set) | set(self.high_set))) != tuple(self.levels):
            raise ValueError("low and high sets must cover the grid")

    @property
    def size(self) -> int:
        return len(self.levels)


def smoothness_mesh(s_min: float, s_max: float, N: int) -> np.ndarray:
    """Uniform mesh of step at most ``1/ln N`` with at least three points.

    A degenerate range gives the single point ``s_min``.
    """
    if not 0 < s_min <= s_max:
        raise ValueError("need 0 < s_min <= s_max")
    if s_min == s_max:
        return np.array([float(s_min)])
    count = max(3, int(math.ceil((s_max - s_min) * math.log(N))) + 1)
    return np.linspace(s_min, s_max, count)


def partition_grid(
    grid: Sequence[int] | ResolutionGrid, cfg: ModelConfig, shared: bool
) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Split levels into a low-budget and a high-budget set.

    Local mode: ``L`` is low iff ``2**L <= eps sqrt(mn) (1 + sqrt(n) 1{sqrt(n) eps > 1})``.
    Shared mode: ``L`` is low iff ``2**L <= eps**2 m n``.
    """
    levels = grid.levels if isinstance(grid, ResolutionGrid) else tuple(grid)
    if not levels:
        raise ValueError("grid must be non-empty")
    eps, m, n = cfg.epsilon, cfg.m, cfg.n
    if shared:
        bound = eps * eps * m * n
    else:
        boost = math.sqrt(n) if math.sqrt(n) * eps > 1.0 else 0.0
        bound = eps * math.sqrt(m * n) * (1.0 + boost)
    low = tuple(L for L in levels if 2.0**L <= bound)
    high = tuple(L for L in levels if 2.0**L > bound)
    return low, high


def resolution_grid(cfg: ModelConfig, s_min: float, s_max: float, shared: bool) -> ResolutionGrid:
    """Levels ``L_s`` for ``s`` on the smoothness mesh, sorted ascending."""
    mesh = smoothness_mesh(s_min, s_max, cfg.N)
    levels = tuple(sorted({optimal_resolution(cfg.with_(s=float(s)), shared) for s in mesh}))
    low, high = partition_grid(levels, cfg, shared)
    return ResolutionGrid(levels, float(s_min), float(s_max), low, high, shared)


@dataclass(frozen=True)
class AdaptiveCalibration:
    """Critical values of the two halves (``None`` for an empty half)."""

    kappa_low: float | None
    kappa_high: float | None
    alpha: float


@dataclass(frozen=True)
class AdaptiveOutcome:
    """Decision of an adaptive test.

    ``statistic`` is the largest exceedance ``stat - kappa`` over the
    non-empty halves, so ``reject`` is ``statistic >= 0``.
    """

    reject: bool
    statistic: float
    critical_value: float
    protocol_tag: str
    grid_size: int
    low_count: int
    high_count: int
    rejecting_level: int | None


@dataclass(frozen=True)
class AdaptiveProcedure:
    """Both halves of an adaptive test for one grid."""

    cfg: ModelConfig
    grid: ResolutionGrid
    low_parts: tuple[ProcedureI, ...]
    high_parts: tuple
    high_scale: float
    tag: str

    @classmethod
    def build(cls, cfg: ModelConfig, grid: ResolutionGrid) -> "AdaptiveProcedure":
        eps, dlt = cfg.epsilon, cfg.delta
        half_eps, half_dlt = eps / 2.0, dlt / 2.0
        low_parts = []
        n_low = len(grid.low_set)
        for L in grid.low_set:
            base = ProcedureI.build(cfg, L, epsilon=half_eps, delta=half_dlt)
            g = np.array(
                [gamma_adaptive_I(eps, dlt, D, base.taus.size, n_low) for D in base.lipschitz]
            )
            low_parts.append(
                ProcedureI.build(
                    cfg, L, epsilon=half_eps, delta=half_dlt, gammas=g,
                    bonferroni_count=base.taus.size * n_low,
                )
            )
        # coordinate budgets K_L use the full epsilon; only the scales are halved
        tau = clip_level(cfg.N, cfg.sigma, cfg.kappa_tilde)
        n_high = len(grid.high_set)
        high_parts = []
        for L in grid.high_set:
            if grid.shared:
                K = coordinate_budget(cfg.n, eps, L)
                g = gamma_adaptive_III(eps, dlt, K, tau, n_high, cfg.N)
                high_parts.append(ProcedureIII.build(cfg, L, gamma=g))
            else:
                load = partition_servers(cfg.m, L, cfg.n, eps).load
                g = gamma_adaptive_II(eps, dlt, load, tau, n_high)
                high_parts.append(ProcedureII.build(cfg, L, gamma=g))
        scale = bonferroni_scale(grid.size if grid.shared else max(n_high, 1))
        tag = "adaptive-shared" if grid.shared else "adaptive-local"
        return cls(cfg, grid, tuple(low_parts), tuple(high_parts), scale, tag)

    @property
    def levels(self) -> tuple[int, ...]:
        return self.grid.levels

    def records(self) -> list[list[MechanismRecord]]:
        """All mechanism records per server, both halves together."""
        out: list[list[MechanismRecord]] = [[] for _ in range(self.cfg.m)]
        for part in (*self.low_parts, *self.high_parts):
            for j, recs in enumerate(part.records()):
                out[j].extend(recs)
        return out

    def composed_epsilon(self) -> float:
        """Largest per-server privacy level of the combined releases at ``delta``."""
        return max(composed_epsilon(r, self.cfg.delta) for r in self.records())

    def evaluate(
        self, x: np.ndarray, noise: Sequence[np.random.Generator],
        shared: np.random.Generator | Mapping[int, SharedRandomness] | None,
    ) -> tuple[np.ndarray, list[int | None]]:
        """Statistics of both halves and the level attaining each maximum.

        An empty half reports ``-inf``. Levels are processed in ascending order
        and each consumes the per-server generators in turn.
        """
        stats = np.full(2, -np.inf)
        argmax: list[int | None] = [None, None]
        for part in self.low_parts:
            d = dimension(part.L)
            val = part.statistic(x[:, :, :d], noise, None)
            if val > stats[0]:
                stats[0], argmax[0] = val, part.L
        for part in self.high_parts:
            d = dimension(part.L)
            if isinstance(part, ProcedureIII):
                rot = shared[part.L] if isinstance(shared, Mapping) else haar_rotation(d, shared)
                y = part.payloads(x[:, :, :d], noise, rot)
                val = _test_III_statistic(y.sum(axis=0), x.shape[0], part.nu)
            else:
                val = part.statistic(x[:, :, :d], noise, None)
            val /= self.high_scale
            if val > stats[1]:
                stats[1], argmax[1] = val, part.L
        return stats, argmax

    def statistic(self, x, noise, shared) -> np.ndarray:
        return self.evaluate(x, noise, shared)[0]

    def decide(self, stats: np.ndarray, argmax: list[int | None], calib: AdaptiveCalibration) -> AdaptiveOutcome:
        margins = []
        for val, kappa, level in ((stats[0], calib.kappa_low, argmax[0]), (stats[1], calib.kappa_high, argmax[1])):
            if kappa is not None and np.isfinite(val):
                margins.append((val - kappa, level))
        if not margins:
            return AdaptiveOutcome(False, -math.inf, 0.0, self.tag, self.grid.size, 0, 0, None)
        best, level = max(margins, key=lambda t: t[0])
        reject = best >= 0.0
        return AdaptiveOutcome(
            reject, float(best), 0.0, self.tag, self.grid.size, len(self.grid.low_set),
            len(self.grid.high_set), level if reject else None,
        )


def calibrate_adaptive(
    cfg: ModelConfig, grid: ResolutionGrid, alpha: float, reps: int, seed: int, workers: int = 1
) -> AdaptiveCalibration:
    """Null-calibrate both halves, each at ``alpha / (number of non-empty halves)``."""
    if reps < 1000:
        raise ValueError("calibration needs at least 1000 replications")
    proc = AdaptiveProcedure.build(cfg, grid)
    active = int(bool(grid.low_set)) + int(bool(grid.high_set))
    if active == 0:
        return AdaptiveCalibration(None, None, alpha)
    stats = null_statistics(proc, reps, seed, workers)
    share = alpha / active
    k_low = empirical_critical_value(stats[:, 0], share) if grid.low_set else None
    k_high = empirical_critical_value(stats[:, 1], share) if grid.high_set else None
    return AdaptiveCalibration(k_low, k_high, alpha)


def _noise_list(rng, m: int) -> Sequence[np.random.Generator]:
    return list(rng) if isinstance(rng, (list, tuple)) else [rng] * m


def adaptive_test_local(
    data: DistributedData, cfg: ModelConfig, grid: ResolutionGrid, calib: AdaptiveCalibration, rng,
) -> AdaptiveOutcome:
    """Procedure I over the low set combined with procedure II over the high set.

    :param rng: one generator, or one generator per server
    """
    if grid.shared:
        raise ValueError("grid was built for shared randomness")
    proc = AdaptiveProcedure.build(cfg, grid)
    stats, argmax = proc.evaluate(data.servers, _noise_list(rng, cfg.m), None)
    return proc.decide(stats, argmax, calib)


def adaptive_test_shared(
    data: DistributedData, cfg: ModelConfig, grid: ResolutionGrid, calib: AdaptiveCalibration,
    shared_rotations: Mapping[int, SharedRandomness] | np.random.Generator, rng,
) -> AdaptiveOutcome:
    """Procedure I over the low set combined with procedure III over the high set."""
    if not grid.shared:
        raise ValueError("grid was built for local randomness")
    proc = AdaptiveProcedure.build(cfg, grid)
    stats, argmax = proc.evaluate(data.servers, _noise_list(rng, cfg.m), shared_rotations)
    return proc.decide(stats, argmax, calib)

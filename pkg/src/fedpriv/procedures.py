"""The non-private benchmark test and the three private testing procedures.

Two layers live here.

* Per-server operations (``stat_I``, ``transcript_I``, ``test_I`` and the
  II/III counterparts) follow the protocol literally: each server turns its
  block into a :class:`Transcript`, and a test aggregates transcripts.
* ``Procedure*`` classes run one whole replication at once. They draw from
  the same per-server generators in the same order as the per-server
  operations, so both layers produce the same statistic for the same seeds.
  The Monte Carlo harness uses this layer.

Procedure I releases clipped, symmetrised chi-square statistics at a grid
of clipping levels. Procedure II splits coordinates over servers. Procedure
III rotates every block with a shared Haar rotation and releases the first
coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats as sps

from . import _kernels
from .privacy import (
    MechanismRecord,
    PrivacyBudget,
    gamma_procedure_I,
    gamma_procedure_II,
    gamma_procedure_III,
    lipschitz_constant,
)
from .rng import Phase, Stream, substream
from .sequence_model import ModelConfig, dimension, draw_observations

__all__ = [
    "PROTOCOLS",
    "Transcript",
    "TestOutcome",
    "SharedRandomness",
    "ServerAssignment",
    "robust_ceil",
    "bonferroni_scale",
    "clipped_normal_second_moment",
    "classical_stat",
    "stat_I",
    "thresholds_T_L",
    "transcript_I",
    "test_I",
    "coordinate_budget",
    "partition_servers",
    "clip_level",
    "transcript_II",
    "test_II",
    "haar_rotation",
    "retained_coordinates",
    "transcript_III",
    "test_III",
    "ClassicalProcedure",
    "ProcedureI",
    "ProcedureII",
    "ProcedureIII",
    "build_procedure",
    "null_statistics",
    "calibrate_threshold",
]

PROTOCOLS = ("classical", "I", "II", "III")
_PROTOCOL_STREAM = {"classical": 0, "I": 1, "II": 2, "III": 3, "adaptive-local": 4, "adaptive-shared": 5}


def robust_ceil(x: float) -> int:
    """Ceiling that ignores floating point dust just above an integer."""
    r = round(x)
    if abs(x - r) <= 1e-9 * max(1.0, abs(x)):
        return int(r)
    return int(math.ceil(x))


def bonferroni_scale(count: float) -> float:
    """``sqrt(ln count)``, floored at 1 so tiny grids do not divide by zero."""
    return math.sqrt(max(math.log(count), 1.0)) if count >= 1 else 1.0


def clipped_normal_second_moment(tau: float) -> float:
    """``E[clip(Z, -tau, tau)**2]`` for a standard normal ``Z``."""
    inside = 2.0 * sps.norm.cdf(tau) - 1.0 - 2.0 * tau * sps.norm.pdf(tau)
    return float(inside + 2.0 * tau * tau * sps.norm.sf(tau))


@dataclass(frozen=True)
class Transcript:
    """Privatised message of one server.

    Attributes:
        server_id: index of the sending server.
        payload: released values.
        records: one mechanism record per released value.
        protocol_tag: ``"I"``, ``"II"``, ``"III"`` or ``"classical"``.
        coordinates: flat coordinate indices of the payload (procedures II and III).
    """

    server_id: int
    payload: np.ndarray
    records: tuple[MechanismRecord, ...]
    protocol_tag: str
    coordinates: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        p = np.asarray(self.payload, dtype=np.float64).ravel()
        if len(self.records) != p.size:
            raise ValueError("one mechanism record is required per released value")
        if self.coordinates and len(self.coordinates) != p.size:
            raise ValueError("coordinate labels must match the payload length")
        object.__setattr__(self, "payload", p)


@dataclass(frozen=True)
class TestOutcome:
    """Decision of a test; ``reject`` is ``statistic >= critical_value``."""

    __test__ = False  # keep pytest from collecting this class

    reject: bool
    statistic: float
    critical_value: float
    protocol_tag: str

    @classmethod
    def decide(cls, statistic: float, critical_value: float, tag: str) -> "TestOutcome":
        return cls(bool(statistic >= critical_value), float(statistic), float(critical_value), tag)


@dataclass(frozen=True)
class SharedRandomness:
    """Public rotation seen by every server."""

    rotation: np.ndarray
    seed: object = None

    def __post_init__(self) -> None:
        u = np.asarray(self.rotation, dtype=np.float64)
        if u.ndim != 2 or u.shape[0] != u.shape[1]:
            raise ValueError("rotation must be a square matrix")
        object.__setattr__(self, "rotation", u)

    @property
    def dim(self) -> int:
        return self.rotation.shape[0]


# ---------------------------------------------------------------------------
# Classical benchmark and procedure I
# ---------------------------------------------------------------------------


def classical_stat(block: np.ndarray, L: int, sigma: float, n: int) -> float:
    """Centred chi-square statistic ``(||sqrt(n) xbar / sigma||^2 - d) / sqrt(d)``."""
    x = np.asarray(block, dtype=np.float64)
    d = dimension(L)
    if x.shape[-1] != d:
        raise ValueError(f"block must be truncated to d_L = {d} coordinates")
    scaled_mean = math.sqrt(n) * x.mean(axis=0) / sigma
    return float((scaled_mean @ scaled_mean - d) / math.sqrt(d))


def _scaled_mean_sq_norms(x: np.ndarray, sigma: float) -> np.ndarray:
    """``||sqrt(n) xbar_j / sigma||^2`` per server for an ``(m, n, d)`` array."""
    n = x.shape[1]
    sums = _kernels.sorted_observation_sums(x)
    return np.sum(sums * sums, axis=1) / (sigma * sigma * n)


def stat_I(
    block: np.ndarray, L: int, tau: float, sigma: float, n: int,
    rng: np.random.Generator | None = None, *, chi2_draw: float | None = None,
) -> float:
    """Symmetrised, clipped chi-square statistic of one server.

    ``clip((||sqrt(n) xbar / sigma||^2 - V) / sqrt(d), -tau, tau)`` with a fresh
    ``V ~ chi2(d)`` taken from ``rng`` unless ``chi2_draw`` supplies it.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    d = dimension(L)
    x = np.asarray(block, dtype=np.float64)
    if x.shape != (n, d):
        raise ValueError(f"expected a block of shape ({n}, {d}), got {x.shape}")
    v = rng.chisquare(d) if chi2_draw is None else float(chi2_draw)
    norm = float(_scaled_mean_sq_norms(x[None], sigma)[0])
    return float(np.clip((norm - v) / math.sqrt(d), -tau, tau))


def thresholds_T_L(L: int, n: int, sigma: float, R: float, N: int, s: float, q: float) -> np.ndarray:
    """Geometric grid of clipping levels for procedure I, in descending order."""
    if not (R > 0 and sigma > 0):
        raise ValueError("R and sigma must be positive")
    count = robust_ceil(1.0 + 2.0 * math.log2(N * R / sigma))
    count = max(count, 1)
    exponent = 2.0 - (0.0 if math.isinf(q) else 2.0 / q)
    top = 2.0 * n * (1.0 - 2.0 ** (-s)) ** exponent * R * R / (sigma * sigma * math.sqrt(2.0**L))
    return top * 0.5 ** np.arange(count)


def transcript_I(
    block: np.ndarray, L: int, tau_set: Sequence[float], budget: PrivacyBudget, sigma: float,
    n: int, rng: np.random.Generator, *, server_id: int = 0, N: int | None = None,
    kappa_tilde: float = 1.0, gammas: Sequence[float] | None = None,
    statistics: Sequence[float] | None = None,
) -> Transcript:
    """One Gaussian release of ``stat_I`` per clipping level.

    The generator is consumed as ``|T|`` chi-square draws followed by ``|T|``
    standard normals. ``gammas`` overrides the scales (adaptive use);
    ``statistics`` injects precomputed clipped statistics and skips the
    chi-square draws.
    """
    taus = np.asarray(tau_set, dtype=np.float64)
    if budget.components != taus.size and gammas is None:
        raise ValueError("budget.components must equal the number of clipping levels")
    N = N or n
    d = dimension(L)
    sens = np.array([lipschitz_constant(n, L, t, N, kappa_tilde) for t in taus])
    if gammas is None:
        g = np.array([gamma_procedure_I(budget.epsilon, budget.delta, D, taus.size) for D in sens])
    else:
        g = np.asarray(gammas, dtype=np.float64)
    if statistics is None:
        v = rng.chisquare(d, size=taus.size)
        s_vals = np.array([stat_I(block, L, t, sigma, n, chi2_draw=vi) for t, vi in zip(taus, v)])
    else:
        s_vals = np.asarray(statistics, dtype=np.float64)
    payload = g * s_vals + rng.standard_normal(taus.size)
    records = tuple(
        MechanismRecord(float(D), float(gi), budget.components, budget.epsilon, budget.delta)
        for D, gi in zip(sens, g)
    )
    return Transcript(server_id, payload, records, "I")


def _normalised_max(
    totals: np.ndarray, gammas: np.ndarray, m: int, bonferroni_count: float
) -> float:
    scale = math.sqrt(m) * np.maximum(gammas, 1.0) * bonferroni_scale(bonferroni_count)
    return float(np.max(totals / scale))


def test_I(
    transcripts: Sequence[Transcript], tau_set: Sequence[float], kappa: float,
    gammas: Sequence[float],
) -> TestOutcome:
    """Max over clipping levels of the normalised server sums."""
    k = len(tau_set)
    if any(t.payload.size != k for t in transcripts):
        raise ValueError("every transcript must carry one value per clipping level")
    totals = np.sum([t.payload for t in transcripts], axis=0)
    stat = _normalised_max(totals, np.asarray(gammas, dtype=np.float64), len(transcripts), k)
    return TestOutcome.decide(stat, kappa, "I")


# ---------------------------------------------------------------------------
# Procedure II
# ---------------------------------------------------------------------------


def coordinate_budget(n: int, epsilon: float, L: int) -> int:
    """``K_L = ceil(min(n eps**2, d_L))``, at least 1."""
    return max(1, robust_ceil(min(n * epsilon * epsilon, dimension(L))))


@dataclass(frozen=True)
class ServerAssignment:
    """Which servers report which coordinates in procedure II.

    Attributes:
        K: coordinate budget ``K_L``.
        set_size: servers per coordinate, ``ceil(m K / d_L)``.
        coordinate_sets: ``coordinate_sets[c]`` lists the servers reporting coordinate c.
        server_coordinates: ``server_coordinates[j]`` lists the coordinates of server j.
    """

    K: int
    set_size: int
    coordinate_sets: tuple[tuple[int, ...], ...]
    server_coordinates: tuple[tuple[int, ...], ...]

    @property
    def load(self) -> int:
        """Largest number of coordinates reported by one server."""
        return max(len(c) for c in self.server_coordinates)


def partition_servers(m: int, L: int, n: int, epsilon: float) -> ServerAssignment:
    """Round-robin split of the ``d_L`` coordinates over the servers.

    Coordinate ``c`` (zero-based) is reported by servers
    ``(c * J + r) mod m`` for ``r < J`` with ``J = ceil(m K / d)``.
    """
    if m < 1:
        raise ValueError("m must be positive")
    d = dimension(L)
    K = coordinate_budget(n, epsilon, L)
    J = robust_ceil(m * K / d)
    sets = tuple(tuple(sorted({(c * J + r) % m for r in range(J)})) for c in range(d))
    per_server: list[list[int]] = [[] for _ in range(m)]
    for c, owners in enumerate(sets):
        for j in owners:
            per_server[j].append(c)
    return ServerAssignment(K, J, sets, tuple(tuple(c) for c in per_server))


def clip_level(N: int, sigma: float, kappa_tilde: float = 1.0) -> float:
    """Clipping level ``kappa_tilde * sqrt(ln(N / sigma))`` of procedures II and III."""
    return kappa_tilde * math.sqrt(math.log(N / sigma))


def transcript_II(
    block: np.ndarray, assignment: ServerAssignment, L: int, budget: PrivacyBudget,
    sigma: float, tau_clip: float, rng: np.random.Generator, *, server_id: int = 0,
    gamma: float | None = None,
) -> Transcript:
    """Clipped coordinate sums of the server's assigned coordinates, privatised.

    The scale uses ``budget.components`` as the coordinate count.
    """
    x = np.asarray(block, dtype=np.float64)
    if x.shape[1] != dimension(L):
        raise ValueError("block width does not match the level")
    coords = np.asarray(assignment.server_coordinates[server_id], dtype=np.int64)
    g = gamma_procedure_II(budget.epsilon, budget.delta, budget.components, tau_clip) if gamma is None else gamma
    sums = np.clip(x[:, coords] / sigma, -tau_clip, tau_clip).sum(axis=0)
    payload = g * sums + rng.standard_normal(coords.size)
    rec = MechanismRecord(2.0 * tau_clip, g, budget.components, budget.epsilon, budget.delta)
    return Transcript(server_id, payload, (rec,) * coords.size, "II", tuple(int(c) for c in coords))


def _coordinate_aggregates(values: list[np.ndarray], assignment: ServerAssignment) -> np.ndarray:
    """``sum_{j in J_c} Y_c^(j) / sqrt(|J_c|)`` for every coordinate c."""
    d = len(assignment.coordinate_sets)
    totals = np.zeros(d)
    for j, coords in enumerate(assignment.server_coordinates):
        if coords:
            totals[list(coords)] += values[j]
    sizes = np.array([len(s) for s in assignment.coordinate_sets], dtype=np.float64)
    return totals / np.sqrt(sizes)


def _test_II_statistic(aggregates: np.ndarray, eta: float) -> float:
    d = aggregates.size
    return float(np.sum(aggregates**2 - eta - 1.0) / (math.sqrt(d) * max(eta, 1.0)))


def test_II(
    transcripts: Sequence[Transcript], assignment: ServerAssignment, L: int, kappa: float,
    eta: float,
) -> TestOutcome:
    """Centred sum of squared coordinate aggregates, normalised by ``max(eta, 1)``."""
    if len(transcripts) != len(assignment.server_coordinates) or len(
        assignment.coordinate_sets
    ) != dimension(L):
        raise ValueError("transcripts do not match the server assignment")
    values = []
    for j, t in enumerate(transcripts):
        if tuple(t.coordinates) != tuple(assignment.server_coordinates[j]):
            raise ValueError(f"server {j} reported coordinates outside its assignment")
        values.append(t.payload)
    agg = _coordinate_aggregates(values, assignment)
    return TestOutcome.decide(_test_II_statistic(agg, eta), kappa, "II")


# ---------------------------------------------------------------------------
# Procedure III
# ---------------------------------------------------------------------------


# pytest would otherwise collect these functions from importing test modules
test_I.__test__ = False  # type: ignore[attr-defined]
test_II.__test__ = False  # type: ignore[attr-defined]


def haar_rotation(d: int, seed) -> SharedRandomness:
    """Haar-distributed orthogonal matrix from a sign-corrected QR factorisation.

    :param seed: integer seed or a ``numpy.random.Generator``
    """
    if d < 1:
        raise ValueError("dimension must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q = q * np.sign(np.diag(r))
    return SharedRandomness(q, None if isinstance(seed, np.random.Generator) else seed)


def retained_coordinates(K: int, L: int) -> int:
    """Size of the released index set: all coordinates of levels ``1..l*``.

    ``l* = ceil(log2 K)`` clamped to ``[1, L]``.
    """
    levels = min(L, max(1, robust_ceil(math.log2(K)) if K > 1 else 0))
    return dimension(max(levels, 1))


def transcript_III(
    block: np.ndarray, shared: SharedRandomness, L: int, budget: PrivacyBudget, sigma: float,
    tau_clip: float, rng: np.random.Generator, *, N: int, server_id: int = 0,
    gamma: float | None = None, K: int | None = None,
) -> Transcript:
    """Clipped sums of the first rotated coordinates, privatised.

    ``K`` (defaulting to ``budget.components``) fixes both the scale and the
    retained index set.
    """
    x = np.asarray(block, dtype=np.float64)
    d = dimension(L)
    if x.shape[1] != d or shared.dim != d:
        raise ValueError("rotation dimension does not match the block")
    K = budget.components if K is None else K
    keep = retained_coordinates(K, L)
    g = gamma_procedure_III(budget.epsilon, budget.delta, K, tau_clip, N) if gamma is None else gamma
    rotated = (x / sigma) @ shared.rotation[:keep].T
    sums = np.clip(rotated, -tau_clip, tau_clip).sum(axis=0)
    payload = g * sums + rng.standard_normal(keep)
    rec = MechanismRecord(2.0 * tau_clip, g, budget.components, budget.epsilon, budget.delta)
    return Transcript(server_id, payload, (rec,) * keep, "III", tuple(range(keep)))


def _test_III_statistic(totals: np.ndarray, m: int, nu: float) -> float:
    agg = totals / math.sqrt(m)
    return float(np.sum(agg**2 - nu) / (math.sqrt(agg.size) * max(nu - 1.0, 1.0)))


def test_III(transcripts: Sequence[Transcript], L: int, kappa: float, nu: float) -> TestOutcome:
    """Centred energy of the averaged rotated releases.

    The statistic is ``sum_c ((sum_j Y_c / sqrt(m))**2 - nu)`` over the
    retained coordinates, divided by ``sqrt(#retained) * max(nu - 1, 1)``.
    """
    sizes = {t.payload.size for t in transcripts}
    if len(sizes) != 1:
        raise ValueError("all transcripts must have the same length")
    totals = np.sum([t.payload for t in transcripts], axis=0)
    return TestOutcome.decide(_test_III_statistic(totals, len(transcripts), nu), kappa, "III")


test_III.__test__ = False  # type: ignore[attr-defined]


# ---------------------------------------------------------------------------
# Whole-replication procedures used by the harness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassicalProcedure:
    """Non-private chi-square test on the pooled sample."""

    cfg: ModelConfig
    L: int
    tag: str = "classical"

    @property
    def levels(self) -> tuple[int, ...]:
        return (self.L,)

    def records(self) -> list[list[MechanismRecord]]:
        return [[] for _ in range(self.cfg.m)]

    def statistic(self, x: np.ndarray, noise: Sequence[np.random.Generator], shared_seed) -> float:
        m, n, d = x.shape
        return classical_stat(x.reshape(m * n, d), self.L, self.cfg.sigma, m * n)


@dataclass(frozen=True)
class ProcedureI:
    """Procedure I at one level.

    ``gammas`` and ``bonferroni_count`` default to the non-adaptive choice;
    the adaptive test passes its own.
    """

    cfg: ModelConfig
    L: int
    taus: np.ndarray
    lipschitz: np.ndarray
    gammas: np.ndarray
    bonferroni_count: float
    budget: PrivacyBudget
    tag: str = "I"

    @classmethod
    def build(cls, cfg: ModelConfig, L: int, *, epsilon: float | None = None,
              delta: float | None = None, gammas: np.ndarray | None = None,
              bonferroni_count: float | None = None) -> "ProcedureI":
        eps = cfg.epsilon if epsilon is None else epsilon
        dlt = cfg.delta if delta is None else delta
        taus = thresholds_T_L(L, cfg.n, cfg.sigma, cfg.R, cfg.N, cfg.s, cfg.q)
        D = np.array([lipschitz_constant(cfg.n, L, t, cfg.N, cfg.kappa_tilde) for t in taus])
        budget = PrivacyBudget(eps, dlt, taus.size)
        if gammas is None:
            gammas = np.array([gamma_procedure_I(eps, dlt, Dt, taus.size) for Dt in D])
        count = taus.size if bonferroni_count is None else bonferroni_count
        return cls(cfg, L, taus, D, np.asarray(gammas, dtype=np.float64), count, budget)

    @property
    def levels(self) -> tuple[int, ...]:
        return (self.L,)

    def records(self) -> list[list[MechanismRecord]]:
        row = [
            MechanismRecord(float(D), float(g), self.budget.components, self.budget.epsilon, self.budget.delta)
            for D, g in zip(self.lipschitz, self.gammas)
        ]
        return [list(row) for _ in range(self.cfg.m)]

    def payloads(self, x: np.ndarray, noise: Sequence[np.random.Generator]) -> np.ndarray:
        """Released values, shape ``(m, |T|)``; same draws as :func:`transcript_I`."""
        m, n, d = x.shape
        norms = _scaled_mean_sq_norms(x, self.cfg.sigma)
        k = self.taus.size
        out = np.empty((m, k))
        for j in range(m):
            v = noise[j].chisquare(d, size=k)
            s_vals = np.clip((norms[j] - v) / math.sqrt(d), -self.taus, self.taus)
            out[j] = self.gammas * s_vals + noise[j].standard_normal(k)
        return out

    def statistic(self, x: np.ndarray, noise: Sequence[np.random.Generator], shared_seed) -> float:
        totals = self.payloads(x, noise).sum(axis=0)
        return _normalised_max(totals, self.gammas, x.shape[0], self.bonferroni_count)


@dataclass(frozen=True)
class ProcedureII:
    """Procedure II at one level.

    ``eta_nominal`` is the closed-form centring ``n eps**2 / (4 K tau**2)``; ``eta`` is the exact
    null second moment ``n gamma**2 E[clip(Z)**2]`` actually used.
    """

    cfg: ModelConfig
    L: int
    assignment: ServerAssignment
    tau: float
    gamma: float
    eta: float
    eta_nominal: float
    budget: PrivacyBudget
    tag: str = "II"

    @classmethod
    def build(cls, cfg: ModelConfig, L: int, *, epsilon: float | None = None,
              delta: float | None = None, gamma: float | None = None) -> "ProcedureII":
        eps = cfg.epsilon if epsilon is None else epsilon
        dlt = cfg.delta if delta is None else delta
        assignment = partition_servers(cfg.m, L, cfg.n, eps)
        tau = clip_level(cfg.N, cfg.sigma, cfg.kappa_tilde)
        budget = PrivacyBudget(eps, dlt, assignment.load)
        if gamma is None:
            gamma = gamma_procedure_II(eps, dlt, assignment.load, tau)
        eta = cfg.n * gamma * gamma * clipped_normal_second_moment(tau)
        eta_nominal = cfg.n * eps * eps / (4.0 * assignment.K * tau * tau)
        return cls(cfg, L, assignment, tau, gamma, eta, eta_nominal, budget)

    @property
    def levels(self) -> tuple[int, ...]:
        return (self.L,)

    def records(self) -> list[list[MechanismRecord]]:
        rec = MechanismRecord(2.0 * self.tau, self.gamma, self.budget.components, self.budget.epsilon, self.budget.delta)
        return [[rec] * len(c) for c in self.assignment.server_coordinates]

    def payloads(self, x: np.ndarray, noise: Sequence[np.random.Generator]) -> list[np.ndarray]:
        sums = _kernels.clipped_observation_sums(x / self.cfg.sigma, self.tau)
        out = []
        for j, coords in enumerate(self.assignment.server_coordinates):
            idx = list(coords)
            out.append(self.gamma * sums[j, idx] + noise[j].standard_normal(len(idx)))
        return out

    def statistic(self, x: np.ndarray, noise: Sequence[np.random.Generator], shared_seed) -> float:
        agg = _coordinate_aggregates(self.payloads(x, noise), self.assignment)
        return _test_II_statistic(agg, self.eta)


@dataclass(frozen=True)
class ProcedureIII:
    """Procedure III at one level with a fresh shared rotation per replication."""

    cfg: ModelConfig
    L: int
    K: int
    keep: int
    tau: float
    gamma: float
    budget: PrivacyBudget
    tag: str = "III"

    @classmethod
    def build(cls, cfg: ModelConfig, L: int, *, epsilon: float | None = None,
              delta: float | None = None, gamma: float | None = None) -> "ProcedureIII":
        eps = cfg.epsilon if epsilon is None else epsilon
        dlt = cfg.delta if delta is None else delta
        K = coordinate_budget(cfg.n, eps, L)
        tau = clip_level(cfg.N, cfg.sigma, cfg.kappa_tilde)
        if gamma is None:
            gamma = gamma_procedure_III(eps, dlt, K, tau, cfg.N)
        return cls(cfg, L, K, retained_coordinates(K, L), tau, gamma, PrivacyBudget(eps, dlt, K))

    @property
    def levels(self) -> tuple[int, ...]:
        return (self.L,)

    @property
    def nu(self) -> float:
        return self.cfg.n * self.gamma * self.gamma + 1.0

    def records(self) -> list[list[MechanismRecord]]:
        rec = MechanismRecord(2.0 * self.tau, self.gamma, self.budget.components, self.budget.epsilon, self.budget.delta)
        return [[rec] * self.keep for _ in range(self.cfg.m)]

    def rotation(self, shared_seed) -> SharedRandomness:
        return haar_rotation(dimension(self.L), shared_seed)

    def payloads(self, x: np.ndarray, noise: Sequence[np.random.Generator], shared: SharedRandomness) -> np.ndarray:
        m, n, d = x.shape
        rotated = (x.reshape(m * n, d) / self.cfg.sigma) @ shared.rotation[: self.keep].T
        sums = _kernels.clipped_observation_sums(rotated.reshape(m, n, self.keep), self.tau)
        return np.stack([self.gamma * sums[j] + noise[j].standard_normal(self.keep) for j in range(m)])

    def statistic(self, x: np.ndarray, noise: Sequence[np.random.Generator], shared_seed) -> float:
        y = self.payloads(x, noise, self.rotation(shared_seed))
        return _test_III_statistic(y.sum(axis=0), x.shape[0], self.nu)


def build_procedure(tag: str, cfg: ModelConfig, L: int):
    """Procedure object for ``tag`` in ``PROTOCOLS`` at level ``L``."""
    if tag == "classical":
        return ClassicalProcedure(cfg, L)
    if tag == "I":
        return ProcedureI.build(cfg, L)
    if tag == "II":
        return ProcedureII.build(cfg, L)
    if tag == "III":
        return ProcedureIII.build(cfg, L)
    raise ValueError(f"unknown protocol {tag!r}; expected one of {PROTOCOLS}")


def replication_streams(seed: int, phase: int, rep: int, tag: str, m: int):
    """Per-server noise generators and the shared-randomness generator of one replication."""
    pid = _PROTOCOL_STREAM.get(tag, 9)
    noise = [substream(seed, phase, rep, Stream.NOISE, pid, j) for j in range(m)]
    shared = substream(seed, phase, rep, Stream.SHARED, pid)
    return noise, shared


def replicate(procedure, f_vec: np.ndarray, seed: int, phase: int, rep: int):
    """Statistic of one replication of ``procedure`` with signal ``f_vec``.

    Scalar for single-level procedures; the adaptive test returns one value per half.
    """
    cfg = procedure.cfg
    x = draw_observations(f_vec, cfg.m, cfg.n, cfg.sigma, seed, rep, phase)
    noise, shared = replication_streams(seed, phase, rep, procedure.tag, cfg.m)
    stat = procedure.statistic(x, noise, shared)
    return float(stat) if np.ndim(stat) == 0 else np.asarray(stat, dtype=np.float64)


def _statistics_chunk(args) -> np.ndarray:
    procedure, f_vec, seed, phase, start, stop = args
    return np.array([replicate(procedure, f_vec, seed, phase, r) for r in range(start, stop)])


def simulate_statistics(
    procedure, f_vec: np.ndarray, reps: int, seed: int, phase: int, workers: int = 1
) -> np.ndarray:
    """Statistics of replications ``0..reps-1`` in replication order.

    Work is split into contiguous chunks; the concatenation order does not
    depend on ``workers``, so results are identical for any worker count.
    """
    f_vec = np.asarray(f_vec, dtype=np.float64)
    chunk = max(1, -(-reps // max(1, 4 * workers)))
    jobs = [(procedure, f_vec, seed, phase, a, min(a + chunk, reps)) for a in range(0, reps, chunk)]
    if workers <= 1 or len(jobs) == 1:
        parts = [_statistics_chunk(j) for j in jobs]
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_statistics_chunk, jobs))
    return np.concatenate(parts) if parts else np.zeros(0)


def signal_dimension(procedure) -> int:
    return dimension(max(procedure.levels))


def null_statistics(procedure, reps: int, seed: int, workers: int = 1) -> np.ndarray:
    """Null-hypothesis statistics drawn in the calibration phase."""
    return simulate_statistics(
        procedure, np.zeros(signal_dimension(procedure)), reps, seed, Phase.CALIBRATE, workers
    )


def empirical_critical_value(null_stats: np.ndarray, alpha: float) -> float:
    """Smallest order statistic whose exceedance frequency is at most ``alpha``."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    return float(np.quantile(np.asarray(null_stats), 1.0 - alpha, method="higher"))


def calibrate_threshold(
    protocol_tag: str, cfg: ModelConfig, L: int, alpha: float, reps: int, seed: int,
    workers: int = 1,
) -> float:
    """Empirical ``1 - alpha`` quantile of the null statistic of a protocol.

    :raises ValueError: if ``reps < 1000``
    """
    if reps < 1000:
        raise ValueError("calibration needs at least 1000 replications")
    proc = build_procedure(protocol_tag, cfg, L)
    return empirical_critical_value(null_statistics(proc, reps, seed, workers), alpha)

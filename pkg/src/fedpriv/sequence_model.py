"""Signals, configurations and data for the Gaussian sequence model.

Coefficients are indexed by a level ``l >= 1`` and a position
``1 <= k <= 2**l``. Up to level ``L`` they are stored flat, level after
level, so coefficient ``(l, k)`` sits at position ``2**l - 2 + (k - 1)`` and
the truncated vector has length ``d_L = 2**(L + 1) - 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .rng import Phase, Stream, substream

__all__ = [
    "dimension",
    "flat_index",
    "level_slice",
    "Signal",
    "ModelConfig",
    "DistributedData",
    "besov_norm",
    "project",
    "gen_signal_single_level",
    "gen_signal_prior",
    "sample_besov_ball",
    "draw_observations",
    "sample_data",
    "signal_to_text",
    "signal_from_text",
    "write_signal",
    "read_signal",
]


def dimension(L: int) -> int:
    """Number of coefficients in levels ``1..L``.

    :param L: resolution level, at least 1
    :return: ``2**(L + 1) - 2``
    """
    if int(L) != L or L < 1:
        raise ValueError(f"resolution level must be a positive integer, got {L!r}")
    return 2 ** (int(L) + 1) - 2


def flat_index(level: int, k: int) -> int:
    """Zero-based flat position of coefficient ``(level, k)``."""
    if level < 1 or not 1 <= k <= 2**level:
        raise ValueError(f"invalid coefficient index ({level}, {k})")
    return 2**level - 2 + (k - 1)


def level_slice(level: int) -> slice:
    """Slice of the flat vector holding the ``2**level`` coefficients of a level."""
    start = 2**level - 2
    return slice(start, start + 2**level)


@dataclass(frozen=True)
class Signal:
    """Finite-level sequence-space signal.

    Attributes:
        values: flat coefficient vector covering levels ``1..max_level``.
            Deeper coefficients are implicitly zero.
    """

    values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=np.float64).ravel()
        if v.size:
            levels = math.log2(v.size + 2) - 1
            if levels != int(levels) or levels < 1:
                raise ValueError(f"flat length {v.size} is not 2**(L+1)-2 for any L")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def zero(cls) -> "Signal":
        return cls(np.zeros(0))

    @classmethod
    def from_coefficients(cls, coeffs: Mapping[tuple[int, int], float]) -> "Signal":
        """Build a signal from an ``{(l, k): value}`` mapping."""
        if not coeffs:
            return cls.zero()
        top = max(l for l, _ in coeffs)
        v = np.zeros(dimension(top))
        for (l, k), val in coeffs.items():
            v[flat_index(l, k)] = float(val)
        return cls(v)

    @property
    def max_level(self) -> int:
        """Deepest stored level (0 for the empty signal)."""
        return 0 if self.values.size == 0 else int(round(math.log2(self.values.size + 2))) - 1

    @property
    def coeffs(self) -> dict[tuple[int, int], float]:
        """Nonzero coefficients as an ``{(l, k): value}`` mapping."""
        out: dict[tuple[int, int], float] = {}
        for l in range(1, self.max_level + 1):
            for k, val in enumerate(self.values[level_slice(l)], start=1):
                if val != 0.0:
                    out[(l, k)] = float(val)
        return out

    def level(self, l: int) -> np.ndarray:
        """Coefficients of level ``l`` (zeros beyond ``max_level``)."""
        if l < 1:
            raise ValueError("levels start at 1")
        if l > self.max_level:
            return np.zeros(2**l)
        return self.values[level_slice(l)].copy()

    def coefficient(self, l: int, k: int) -> float:
        idx = flat_index(l, k)
        return float(self.values[idx]) if idx < self.values.size else 0.0

    def vector(self, L: int) -> np.ndarray:
        """Flat coefficients of levels ``1..L``, zero padded or truncated."""
        d = dimension(L)
        out = np.zeros(d)
        keep = min(d, self.values.size)
        out[:keep] = self.values[:keep]
        return out

    def squared_norm(self) -> float:
        return float(np.dot(self.values, self.values))

    def scaled(self, c: float) -> "Signal":
        return Signal(self.values * float(c))


@dataclass(frozen=True)
class ModelConfig:
    """Model, smoothness and privacy parameters of one experiment.

    Attributes:
        m: number of servers.
        n: observations per server.
        sigma: noise level.
        s: smoothness of the Besov class.
        R: Besov radius.
        p: Besov integrability index, ``p >= 2`` (``math.inf`` allowed).
        q: Besov fine index, ``q >= 1`` (``math.inf`` allowed).
        epsilon: privacy parameter, must exceed ``1/N``.
        delta: privacy parameter in ``[0, 1)``.
        alpha: target level.
        kappa_tilde: constant in front of the clipping and Lipschitz scales.
    """

    m: int
    n: int
    sigma: float
    s: float
    epsilon: float
    delta: float
    alpha: float
    R: float = 1.0
    p: float = 2.0
    q: float = math.inf
    kappa_tilde: float = 1.0

    def __post_init__(self) -> None:
        for name in ("m", "n"):
            val = getattr(self, name)
            if isinstance(val, bool) or int(val) != val or val < 1:
                raise ValueError(f"{name} must be a positive integer, got {val!r}")
            object.__setattr__(self, name, int(val))
        for name in ("sigma", "s", "R", "kappa_tilde"):
            if not getattr(self, name) > 0 or not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be a finite positive number")
        if not self.p >= 2:
            raise ValueError(f"p must be at least 2, got {self.p!r}")
        if not self.q >= 1:
            raise ValueError(f"q must be at least 1, got {self.q!r}")
        if not self.epsilon > 1.0 / self.N or not math.isfinite(self.epsilon):
            raise ValueError(f"epsilon must exceed 1/N = {1.0 / self.N:.6g}, got {self.epsilon!r}")
        if not 0.0 <= self.delta < 1.0:
            raise ValueError(f"delta must lie in [0, 1), got {self.delta!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha!r}")

    @property
    def N(self) -> int:
        """Total number of observations ``m * n``."""
        return self.m * self.n

    def with_(self, **changes) -> "ModelConfig":
        """Copy with some fields replaced (validation reruns)."""
        return replace(self, **changes)


@dataclass(frozen=True)
class DistributedData:
    """Observations of all servers truncated to one resolution level.

    Attributes:
        servers: array of shape ``(m, n, d_L)``; ``servers[j]`` is server j's block.
        level: the resolution level ``L``.
    """

    servers: np.ndarray
    level: int

    def __post_init__(self) -> None:
        x = np.asarray(self.servers, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != dimension(self.level):
            raise ValueError(f"expected shape (m, n, {dimension(self.level)}), got {x.shape}")
        object.__setattr__(self, "servers", x)

    @property
    def m(self) -> int:
        return self.servers.shape[0]

    @property
    def n(self) -> int:
        return self.servers.shape[1]


def _p_norm(v: np.ndarray, p: float) -> float:
    if v.size == 0:
        return 0.0
    if math.isinf(p):
        return float(np.max(np.abs(v)))
    return float(np.sum(np.abs(v) ** p) ** (1.0 / p))


def besov_norm(f: Signal, s: float, p: float, q: float) -> float:
    """Besov sequence norm over the stored levels.

    Level ``l`` contributes ``2**(l (s + 1/2 - 1/p)) * ||f_l||_p``; the
    contributions are combined with an ``l_q`` norm (a maximum when
    ``q = inf``).
    """
    if not p >= 1 or not q >= 1:
        raise ValueError("p and q must be at least 1")
    inv_p = 0.0 if math.isinf(p) else 1.0 / p
    weights = [
        2.0 ** (l * (s + 0.5 - inv_p)) * _p_norm(f.level(l), p)
        for l in range(1, f.max_level + 1)
    ]
    if not weights:
        return 0.0
    w = np.asarray(weights)
    if math.isinf(q):
        return float(np.max(w))
    return float(np.sum(w**q) ** (1.0 / q))


def project(f: Signal, L: int) -> Signal:
    """Zero every coefficient deeper than level ``L``."""
    dimension(L)
    if f.max_level <= L:
        return f
    return Signal(f.values[: dimension(L)])


def gen_signal_single_level(L: int, rho: float, spread: str = "spike", seed: int = 0) -> Signal:
    """Alternative with all of its energy ``rho**2`` on level ``L``.

    ``spike`` puts everything on ``(L, 1)``; ``uniform`` spreads it evenly
    over the ``2**L`` coefficients. The seed is accepted for interface
    symmetry; both layouts are deterministic.
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    v = np.zeros(dimension(L))
    sl = level_slice(L)
    if spread == "spike":
        v[sl.start] = rho
    elif spread == "uniform":
        v[sl] = rho * 2.0 ** (-L / 2.0)
    else:
        raise ValueError(f"spread must be 'spike' or 'uniform', got {spread!r}")
    return Signal(v)


def gen_signal_prior(L: int, rho: float, c_scale: float = 1.0, seed: int = 0) -> Signal:
    """Draw from the centred Gaussian prior on levels ``1..L``.

    Each of the ``d_L`` coefficients has variance ``c_scale**-0.5 * rho**2 / d_L``,
    so the expected squared norm is ``c_scale**-0.5 * rho**2``.
    """
    if rho < 0 or not c_scale > 0:
        raise ValueError("rho must be non-negative and c_scale positive")
    d = dimension(L)
    if rho == 0:
        return Signal(np.zeros(d))
    rng = substream(seed, Phase.AUXILIARY, 0, Stream.SIGNAL, 0)
    std = math.sqrt(c_scale**-0.5 / d) * rho
    return Signal(std * rng.standard_normal(d))


def sample_besov_ball(
    levels: int, s: float, p: float, q: float, R: float, rng: np.random.Generator,
    max_tries: int = 10_000,
) -> Signal:
    """Random member of the Besov ball of radius ``R`` by rejection.

    Candidates have Gaussian coefficients with level-wise scale
    ``2**(-l (s + 1/2))`` times a random overall amplitude; the first one
    whose norm does not exceed ``R`` is returned.
    """
    d = dimension(levels)
    decay = np.concatenate(
        [np.full(2**l, 2.0 ** (-l * (s + 0.5))) for l in range(1, levels + 1)]
    )
    for _ in range(max_tries):
        amplitude = R * rng.uniform(0.0, 3.0)
        cand = Signal(amplitude * decay * rng.standard_normal(d))
        if besov_norm(cand, s, p, q) <= R:
            return cand
    raise RuntimeError("rejection sampler did not produce a ball member")


def draw_observations(
    f_vec: np.ndarray, m: int, n: int, sigma: float, seed: int, replication: int = 0,
    phase: int = Phase.EVALUATE,
) -> np.ndarray:
    """Observations ``f + sigma * Z`` of shape ``(m, n, d)``.

    Server ``j`` draws its noise from its own substream, so any server's block
    can be regenerated alone.
    """
    f_vec = np.asarray(f_vec, dtype=np.float64)
    d = f_vec.size
    out = np.empty((m, n, d))
    for j in range(m):
        z = substream(seed, phase, replication, Stream.DATA, j).standard_normal((n, d))
        out[j] = f_vec + sigma * z
    return out


def sample_data(
    f: Signal, cfg: ModelConfig, L: int, seed: int, *, replication: int = 0,
    noise_scale: float | None = None,
) -> DistributedData:
    """Draw every server's block from the sequence model truncated at level ``L``.

    :param noise_scale: overrides ``cfg.sigma``; zero gives noiseless data
    """
    sigma = cfg.sigma if noise_scale is None else float(noise_scale)
    x = draw_observations(f.vector(L), cfg.m, cfg.n, sigma, seed, replication)
    return DistributedData(x, L)


def signal_to_text(f: Signal) -> str:
    """Serialise as ``levels=L`` followed by ``l k value`` lines."""
    lines = [f"levels={f.max_level}"]
    for (l, k), val in sorted(f.coeffs.items()):
        lines.append(f"{l} {k} {val!r}")
    return "\n".join(lines) + "\n"


def signal_from_text(text: str) -> Signal:
    """Parse the format written by :func:`signal_to_text`."""
    rows = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not rows or not rows[0].startswith("levels="):
        raise ValueError("signal text must start with a 'levels=L' header")
    levels = int(rows[0].split("=", 1)[1])
    coeffs: dict[tuple[int, int], float] = {}
    for row in rows[1:]:
        parts = row.split()
        if len(parts) != 3:
            raise ValueError(f"malformed coefficient line: {row!r}")
        l, k = int(parts[0]), int(parts[1])
        if l > levels:
            raise ValueError(f"coefficient level {l} exceeds header levels={levels}")
        coeffs[(l, k)] = float(parts[2])
    if levels == 0:
        return Signal.zero()
    v = np.zeros(dimension(levels))
    for (l, k), val in coeffs.items():
        v[flat_index(l, k)] = val
    return Signal(v)


def write_signal(f: Signal, path: str | Path) -> None:
    Path(path).write_text(signal_to_text(f), encoding="utf-8")


def read_signal(path: str | Path) -> Signal:
    return signal_from_text(Path(path).read_text(encoding="utf-8"))

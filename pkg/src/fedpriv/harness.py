"""Monte Carlo risk estimation, detection boundaries and protocol comparisons.

Every replication is addressed by ``(seed, phase, replication)`` through
:mod:`fedpriv.rng`. Data streams do not depend on the protocol, so two
protocols run with the same seed see the same data (common random numbers)
while their privacy noise stays independent. Aggregates are counts over
statistics returned in replication order, which keeps every result
independent of the worker count.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .adaptive import AdaptiveProcedure, ResolutionGrid, calibrate_adaptive
from .procedures import (
    PROTOCOLS,
    build_procedure,
    empirical_critical_value,
    null_statistics,
    signal_dimension,
    simulate_statistics,
)
from .rates import separation_rate
from .rng import Phase
from .sequence_model import ModelConfig, Signal, gen_signal_single_level

__all__ = [
    "ADAPTIVE_PROTOCOLS",
    "BracketError",
    "CalibratedTest",
    "RiskEstimate",
    "BoundaryEstimate",
    "ComparisonRow",
    "config_hash",
    "calibrate_test",
    "rejection_indicators",
    "estimate_risk",
    "detection_boundary",
    "compare_protocols",
    "paired_difference",
    "run_id",
    "write_csv",
]

ADAPTIVE_PROTOCOLS = ("adaptive-local", "adaptive-shared")
MAX_DOUBLINGS = 60


class BracketError(RuntimeError):
    """No rho with the requested power was found within the doubling budget."""


def config_hash(cfg: ModelConfig) -> str:
    """Short SHA-1 of the canonical JSON form of a configuration."""
    return hashlib.sha1(_canonical(asdict(cfg)).encode()).hexdigest()[:12]


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)


def _json_default(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, tuple):
        return list(v)
    raise TypeError(f"cannot serialise {type(v).__name__}")


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CalibratedTest:
    """A procedure together with its null-calibrated critical values.

    Single-level procedures carry one critical value. Adaptive procedures
    carry one per half, ``None`` for an empty half, and reject when either
    half does.
    """

    procedure: object
    critical_values: tuple[float | None, ...]
    alpha: float

    @property
    def tag(self) -> str:
        return self.procedure.tag


def _make_procedure(tag: str, cfg: ModelConfig, level):
    if tag in ADAPTIVE_PROTOCOLS:
        if not isinstance(level, ResolutionGrid):
            raise ValueError(f"{tag} needs a ResolutionGrid, got {type(level).__name__}")
        if level.shared != (tag == "adaptive-shared"):
            raise ValueError(f"grid randomness mode does not match {tag}")
        return AdaptiveProcedure.build(cfg, level)
    if tag not in PROTOCOLS:
        raise ValueError(f"unknown protocol {tag!r}")
    if isinstance(level, ResolutionGrid):
        raise ValueError(f"{tag} runs at a single level")
    return build_procedure(tag, cfg, int(level))


def calibrate_test(
    tag: str, cfg: ModelConfig, level, reps: int, seed: int, workers: int = 1,
    alpha: float | None = None,
) -> CalibratedTest:
    """Build the procedure for ``tag`` and calibrate it on null replications.

    :param level: resolution level, or a :class:`ResolutionGrid` for adaptive tags
    :param alpha: defaults to ``cfg.alpha``
    """
    alpha = cfg.alpha if alpha is None else alpha
    if reps < 1000:
        raise ValueError("calibration needs at least 1000 replications")
    proc = _make_procedure(tag, cfg, level)
    if isinstance(proc, AdaptiveProcedure):
        cal = calibrate_adaptive(cfg, proc.grid, alpha, reps, seed, workers)
        return CalibratedTest(proc, (cal.kappa_low, cal.kappa_high), alpha)
    kappa = empirical_critical_value(null_statistics(proc, reps, seed, workers), alpha)
    return CalibratedTest(proc, (kappa,), alpha)


def rejection_indicators(test: CalibratedTest, stats: np.ndarray) -> np.ndarray:
    """Boolean rejection per replication."""
    s = np.asarray(stats, dtype=np.float64)
    if s.ndim == 1:
        return s >= test.critical_values[0]
    out = np.zeros(s.shape[0], dtype=bool)
    for i, kappa in enumerate(test.critical_values):
        if kappa is not None:
            out |= s[:, i] >= kappa
    return out


def _signal_vector(test: CalibratedTest, signal: Signal | None) -> np.ndarray:
    d = signal_dimension(test.procedure)
    if signal is None:
        return np.zeros(d)
    v = np.zeros(d)
    w = np.asarray(signal.values, dtype=np.float64)[:d]
    v[: w.size] = w
    return v


def _rejections(test: CalibratedTest, signal: Signal | None, reps: int, seed: int, workers: int) -> np.ndarray:
    stats = simulate_statistics(
        test.procedure, _signal_vector(test, signal), reps, seed, Phase.EVALUATE, workers
    )
    return rejection_indicators(test, stats)


# ---------------------------------------------------------------------------
# Risk
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RiskEstimate:
    """Monte Carlo type I and type II error of one test against one alternative."""

    type_i: float
    type_ii: float
    reps: int
    se_i: float
    se_ii: float
    config_hash: str

    @property
    def risk(self) -> float:
        return self.type_i + self.type_ii


def _binomial_se(p: float, reps: int) -> float:
    return math.sqrt(p * (1.0 - p) / reps)


def estimate_risk(
    protocol_tag: str, cfg: ModelConfig, level, signal: Signal, reps: int, seed: int, *,
    workers: int = 1, calib_reps: int = 2000, calibrated: CalibratedTest | None = None,
) -> RiskEstimate:
    """Type I error under ``f = 0`` and type II error under ``signal``.

    The critical value comes from a separate calibration phase and is reused
    across all evaluation replications.

    :raises ValueError: if ``reps < 100``
    """
    if reps < 100:
        raise ValueError("risk estimation needs at least 100 replications")
    test = calibrated or calibrate_test(protocol_tag, cfg, level, calib_reps, seed, workers)
    p_i = float(np.mean(_rejections(test, None, reps, seed, workers)))
    p_ii = 1.0 - float(np.mean(_rejections(test, signal, reps, seed, workers)))
    return RiskEstimate(p_i, p_ii, reps, _binomial_se(p_i, reps), _binomial_se(p_ii, reps), config_hash(cfg))


# ---------------------------------------------------------------------------
# Detection boundary
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundaryEstimate:
    """Smallest signal size reaching ``target_power``, up to the bracket width."""

    rho_star: float
    target_power: float
    bracket: tuple[float, float]
    iterations: int


def _start_rho(tag: str, cfg: ModelConfig) -> float:
    shared = tag in ("III", "adaptive-shared")
    return min(1.0, math.sqrt(separation_rate(cfg, shared)))


def detection_boundary(
    protocol_tag: str, cfg: ModelConfig, L: int, target_power: float, reps_per_probe: int = 1000,
    tol_rel: float = 0.05, seed: int = 0, *, spread: str = "spike", workers: int = 1,
    calib_reps: int = 2000, calibrated: CalibratedTest | None = None,
    rho_start: float | None = None,
) -> BoundaryEstimate:
    """Geometric bisection on ``rho`` for single-level alternatives at level ``L``.

    Every probe reuses the calibrated critical values and the same
    replication seeds, so the estimated power curve is built from common
    random numbers and the search is deterministic given ``seed``. The
    search starts at ``rho_start`` when given, otherwise at the closed-form
    rate.

    :raises ValueError: if ``target_power`` is not in ``(alpha, 1)``
    :raises BracketError: if no bracket is found within 60 doublings
    """
    if not cfg.alpha < target_power < 1.0:
        raise ValueError("target_power must lie in (alpha, 1)")
    if not tol_rel > 0:
        raise ValueError("tol_rel must be positive")
    test = calibrated or calibrate_test(protocol_tag, cfg, L, calib_reps, seed, workers)

    def power(rho: float) -> float:
        sig = gen_signal_single_level(L, rho, spread)
        return float(np.mean(_rejections(test, sig, reps_per_probe, seed, workers)))

    iterations = 0
    hi = _start_rho(protocol_tag, cfg) if rho_start is None else float(rho_start)
    if not hi > 0:
        raise ValueError("rho_start must be positive")
    while power(hi) < target_power:
        iterations += 1
        if iterations > MAX_DOUBLINGS:
            raise BracketError(f"power {target_power} not reached within {MAX_DOUBLINGS} doublings")
        hi *= 2.0
    lo = hi / 2.0
    halvings = 0
    while power(lo) >= target_power:
        iterations += 1
        halvings += 1
        hi = lo
        lo /= 2.0
        if halvings > MAX_DOUBLINGS:
            # power at essentially zero signal already meets the target
            return BoundaryEstimate(lo, target_power, (0.0, hi), iterations)
    while hi / lo > 1.0 + tol_rel:
        iterations += 1
        mid = math.sqrt(lo * hi)
        if power(mid) >= target_power:
            hi = mid
        else:
            lo = mid
    return BoundaryEstimate(math.sqrt(lo * hi), target_power, (lo, hi), iterations)


# ---------------------------------------------------------------------------
# Paired protocol comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComparisonRow:
    rho: float
    protocol: str
    power: float
    se: float
    critical_value: float


def compare_protocols(
    cfg: ModelConfig, L: int, rho_grid: Sequence[float], reps: int, seed: int, *,
    protocols: Sequence[str] = PROTOCOLS, spread: str = "spike", workers: int = 1,
    calib_reps: int = 2000, return_indicators: bool = False,
):
    """Power of each protocol at each ``rho`` from paired replications.

    ``rho = 0`` evaluates the null, so that row reproduces the levels.

    :return: list of :class:`ComparisonRow`; with ``return_indicators`` also a
        dict ``(protocol, rho) -> rejection indicators`` for paired analyses
    """
    rows: list[ComparisonRow] = []
    indicators: dict[tuple[str, float], np.ndarray] = {}
    tests = {tag: calibrate_test(tag, cfg, L, calib_reps, seed, workers) for tag in protocols}
    for rho in rho_grid:
        rho = float(rho)
        sig = None if rho == 0.0 else gen_signal_single_level(L, rho, spread)
        for tag in protocols:
            rej = _rejections(tests[tag], sig, reps, seed, workers)
            p = float(np.mean(rej))
            rows.append(ComparisonRow(rho, tag, p, _binomial_se(p, reps), float(tests[tag].critical_values[0])))
            indicators[(tag, rho)] = rej
    return (rows, indicators) if return_indicators else rows


def paired_difference(a: np.ndarray, b: np.ndarray) -> tuple[float, float, float]:
    """Power difference of two paired indicator vectors.

    :return: ``(mean(a) - mean(b), paired SE, unpaired SE)``
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("indicator vectors must be one-dimensional and paired")
    r = a.size
    diff = a - b
    paired = float(np.std(diff, ddof=1) / math.sqrt(r)) if r > 1 else math.inf
    unpaired = math.sqrt(_binomial_se(a.mean(), r) ** 2 + _binomial_se(b.mean(), r) ** 2)
    return float(diff.mean()), paired, unpaired


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def run_id(command: str, config: Mapping, seed: int) -> str:
    """Deterministic 12-hex identifier of a run (the worker count is excluded)."""
    return hashlib.sha1(_canonical({"command": command, "config": config, "seed": seed}).encode()).hexdigest()[:12]


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


def write_csv(
    path: str | Path, columns: Sequence[str], rows: Iterable[Sequence], *, command: str,
    config: Mapping, seed: int, sidecar: bool = True, note: str | None = None,
) -> tuple[Path, Path | None]:
    """Write a CSV with a provenance comment line and a JSON sidecar.

    The first line is ``# run_id=<id> config=<canonical json>``, the second
    the column header; ``note`` adds one more comment line before the
    header. The sidecar ``<stem>.json`` stores the command, seed
    and configuration so the run can be replayed.

    :raises OSError: if the directory is not writable
    """
    path = Path(path)
    rid = run_id(command, config, seed)
    buf = io.StringIO()
    buf.write(f"# run_id={rid} command={command} seed={seed} config={_canonical(config)}\n")
    if note:
        buf.write(f"# {note}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        if len(row) != len(columns):
            raise ValueError("row length does not match the header")
        writer.writerow([_cell(v) for v in row])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8")
    if not sidecar:
        return path, None
    side = path.with_suffix(".json")
    side.write_text(
        json.dumps({"command": command, "seed": seed, "run_id": rid, "config": dict(config)},
                   sort_keys=True, indent=2, default=_json_default) + "\n",
        encoding="utf-8",
    )
    return path, side

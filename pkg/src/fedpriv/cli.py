"""Command-line entry point.

``fedpriv <command> --config <path> [--out <dir>] [--workers k] [--seed u]``
with ``command`` one of ``rates``, ``regimes``, ``calibrate``, ``risk``,
``boundary``, ``compare``, ``adaptive``; ``fedpriv figure2 --out <dir>``
writes the bundle of smoothness curves.

Config files are flat ``key = value`` text or a JSON object, including the
JSON sidecar of an earlier run. The model parameters ``m n sigma s epsilon
delta alpha`` are always required. Exit codes: 0 success, 2 configuration
error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import math
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .adaptive import resolution_grid
from .harness import (
    ADAPTIVE_PROTOCOLS,
    BracketError,
    calibrate_test,
    compare_protocols,
    detection_boundary,
    estimate_risk,
    write_csv,
)
from .procedures import PROTOCOLS
from .rates import classify_regime, rate_terms, optimal_resolution, separation_rate
from .sequence_model import ModelConfig, Signal, gen_signal_prior, gen_signal_single_level, read_signal

__all__ = [
    "COMMANDS", "ConfigError", "RunConfig", "load_config", "run", "figure2_eps_grid",
    "emit_figure2_bundle", "main",
]

COMMANDS = ("rates", "regimes", "calibrate", "risk", "boundary", "compare", "adaptive")
REQUIRED = ("m", "n", "sigma", "s", "epsilon", "delta", "alpha")
FIGURE2_CONFIGS = ((5, 5), (2, 15))
FIGURE2_SMOOTHNESS = (0.2, 0.5, 1.0, 3.0)
RATE_NOTE = "rates use constant 1 in every asymptotic relation and omit logarithmic factors"


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


def _real(v) -> float:
    if isinstance(v, bool):
        raise ValueError("expected a number")
    if isinstance(v, str) and v.strip().lower() in ("inf", "+inf", "infinity"):
        return math.inf
    return float(v)


def _integer(v) -> int:
    if isinstance(v, bool):
        raise ValueError("expected an integer")
    f = float(v)
    if f != int(f):
        raise ValueError("expected an integer")
    return int(f)


def _flag(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true or false")


def _words(v) -> tuple[str, ...]:
    items = v if isinstance(v, (list, tuple)) else re.split(r"[,\s]+", str(v))
    return tuple(str(x).strip() for x in items if str(x).strip())


def _grid(v) -> tuple[float, ...]:
    """Comma list, or ``log:lo:hi:count`` / ``lin:lo:hi:count``."""
    if isinstance(v, (list, tuple)):
        return tuple(_real(x) for x in v)
    s = str(v).strip()
    if s.startswith(("log:", "lin:")):
        kind, lo, hi, count = s.split(":")
        lo, hi, count = _real(lo), _real(hi), _integer(count)
        pts = np.geomspace(lo, hi, count) if kind == "log" else np.linspace(lo, hi, count)
        return tuple(float(x) for x in pts)
    return tuple(_real(x) for x in s.split(","))


_MODEL_KEYS: dict[str, Callable[[Any], Any]] = {
    "m": _integer, "n": _integer, "sigma": _real, "s": _real, "epsilon": _real,
    "delta": _real, "alpha": _real, "R": _real, "p": _real, "q": _real, "kappa_tilde": _real,
}
_RUN_KEYS: dict[str, Callable[[Any], Any]] = {
    "protocols": _words, "L": _integer, "shared": _flag, "local": _flag,
    "eps_grid": _grid, "rho_grid": _grid, "s_min": _real, "s_max": _real,
    "reps": _integer, "calib_reps": _integer, "target_power": _real, "tol_rel": _real,
    "spread": str, "signal": str, "signal_rho": _real, "signal_file": str, "seed": _integer,
}


@dataclass(frozen=True)
class RunConfig:
    """Validated contents of a config file.

    Attributes:
        model: the model configuration.
        options: run options, only keys that were given.
        raw: the typed key-value pairs as read, used for provenance.
    """

    model: ModelConfig
    options: dict[str, Any] = field(default_factory=dict)
    raw: dict[str, Any] = field(default_factory=dict)

    def get(self, key: str, default=None):
        return self.options.get(key, default)


def _read_pairs(path: Path) -> dict[str, Any]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("a JSON config must be an object")
        if "config" in data and isinstance(data["config"], dict):
            # sidecar of an earlier run
            pairs = dict(data["config"])
            if "seed" in data and "seed" not in pairs:
                pairs["seed"] = data["seed"]
            return pairs
        return data
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    pairs: dict[str, Any] = {}
    for section in parser.sections():
        pairs.update(parser[section])
    return pairs


def load_config(path: str | Path) -> RunConfig:
    """Parse and validate a config file.

    :raises ConfigError: unreadable file, unknown key, bad value, missing model
        parameter or a violated model invariant
    """
    pairs = _read_pairs(Path(path))
    unknown = sorted(set(pairs) - set(_MODEL_KEYS) - set(_RUN_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    missing = [k for k in REQUIRED if k not in pairs]
    if missing:
        raise ConfigError(f"missing required field(s): {', '.join(missing)}")
    typed: dict[str, Any] = {}
    for key, value in pairs.items():
        conv = _MODEL_KEYS.get(key) or _RUN_KEYS[key]
        try:
            typed[key] = conv(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r}: {value!r} ({exc})") from exc
    try:
        model = ModelConfig(**{k: typed[k] for k in _MODEL_KEYS if k in typed})
    except ValueError as exc:
        raise ConfigError(f"invalid model configuration: {exc}") from exc
    options = {k: v for k, v in typed.items() if k in _RUN_KEYS}
    for tag in options.get("protocols", ()):
        if tag not in PROTOCOLS + ADAPTIVE_PROTOCOLS:
            raise ConfigError(f"unknown protocol {tag!r}")
    return RunConfig(model, options, typed)


def _provenance(rc: RunConfig) -> dict[str, Any]:
    out = {}
    for k, v in rc.raw.items():
        out[k] = list(v) if isinstance(v, tuple) else ("inf" if v == math.inf else v)
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _modes(rc: RunConfig) -> list[bool]:
    local, shared = rc.get("local", True), rc.get("shared", True)
    modes = ([False] if local else []) + ([True] if shared else [])
    if not modes:
        raise ConfigError("at least one of local, shared must be true")
    return modes


def _eps_values(rc: RunConfig) -> tuple[float, ...]:
    return rc.get("eps_grid") or (rc.model.epsilon,)


def _with_eps(cfg: ModelConfig, eps: float) -> ModelConfig:
    try:
        return cfg.with_(epsilon=eps)
    except ValueError as exc:
        raise ConfigError(f"invalid epsilon in grid: {exc}") from exc


def _level(rc: RunConfig, cfg: ModelConfig, tag: str) -> int:
    return rc.get("L") or optimal_resolution(cfg, tag == "III")


def _protocols(rc: RunConfig, default: Sequence[str]) -> tuple[str, ...]:
    return rc.get("protocols") or tuple(default)


def _signal(rc: RunConfig, L: int, seed: int) -> Signal:
    if "signal_file" in rc.options:
        return read_signal(rc.options["signal_file"])
    if "signal_rho" not in rc.options:
        raise ConfigError("missing required field: signal_rho (or signal_file)")
    kind = rc.get("signal", "spike")
    rho = rc.options["signal_rho"]
    if kind == "prior":
        return gen_signal_prior(L, rho, seed=seed)
    return gen_signal_single_level(L, rho, kind)


def cmd_rates(rc: RunConfig, seed: int, workers: int):
    cols = ["epsilon", "rho2_local", "rho2_shared"]
    rows = []
    for eps in _eps_values(rc):
        cfg = _with_eps(rc.model, eps)
        rows.append([eps, separation_rate(cfg, False), separation_rate(cfg, True)])
    return cols, rows


def cmd_regimes(rc: RunConfig, seed: int, workers: int):
    cols = ["shared", "epsilon", "regime_id", "dominant_term", "rho2", "branch_value",
            "unconstrained", "high_budget", "low_budget", "privacy"]
    rows = []
    for shared in _modes(rc):
        for eps in _eps_values(rc):
            cfg = _with_eps(rc.model, eps)
            rep = classify_regime(cfg, shared)
            t = rate_terms(cfg, shared)
            rows.append([shared, eps, rep.regime_id, rep.dominant_term, rep.rho_squared, rep.branch_value,
                         t.unconstrained, t.high_budget, t.low_budget, t.privacy])
    return cols, rows


def _grid_for(rc: RunConfig, cfg: ModelConfig, tag: str):
    s_min, s_max = rc.get("s_min", cfg.s), rc.get("s_max", cfg.s)
    return resolution_grid(cfg, s_min, s_max, tag == "adaptive-shared")


def cmd_calibrate(rc: RunConfig, seed: int, workers: int):
    cols = ["protocol", "level", "half", "kappa", "calib_reps"]
    reps = rc.get("calib_reps", rc.get("reps", 2000))
    rows = []
    for tag in _protocols(rc, PROTOCOLS):
        if tag in ADAPTIVE_PROTOCOLS:
            grid = _grid_for(rc, rc.model, tag)
            test = calibrate_test(tag, rc.model, grid, reps, seed, workers)
            levels = " ".join(map(str, grid.levels))
            for half, kappa in zip(("low", "high"), test.critical_values):
                rows.append([tag, levels, half, kappa, reps])
        else:
            L = _level(rc, rc.model, tag)
            test = calibrate_test(tag, rc.model, L, reps, seed, workers)
            rows.append([tag, L, "single", test.critical_values[0], reps])
    return cols, rows


def cmd_risk(rc: RunConfig, seed: int, workers: int):
    cols = ["protocol", "level", "type_i", "type_ii", "se_i", "se_ii", "risk", "reps", "config_hash"]
    reps = rc.get("reps", 2000)
    calib = rc.get("calib_reps", 2000)
    rows = []
    for tag in _protocols(rc, PROTOCOLS):
        if tag in ADAPTIVE_PROTOCOLS:
            level = _grid_for(rc, rc.model, tag)
            label = " ".join(map(str, level.levels))
            sig = _signal(rc, rc.get("L") or max(level.levels), seed)
        else:
            level = _level(rc, rc.model, tag)
            label = level
            sig = _signal(rc, level, seed)
        r = estimate_risk(tag, rc.model, level, sig, reps, seed, workers=workers, calib_reps=calib)
        rows.append([tag, label, r.type_i, r.type_ii, r.se_i, r.se_ii, r.risk, r.reps, r.config_hash])
    return cols, rows


def cmd_boundary(rc: RunConfig, seed: int, workers: int):
    cols = ["protocol", "epsilon", "level", "rho_star", "bracket_lo", "bracket_hi", "iterations", "target_power"]
    target = rc.get("target_power", 0.5)
    reps = rc.get("reps", 1000)
    rows = []
    for tag in _protocols(rc, PROTOCOLS):
        if tag in ADAPTIVE_PROTOCOLS:
            raise ConfigError("boundary runs single-level protocols only")
        for eps in _eps_values(rc):
            cfg = _with_eps(rc.model, eps)
            L = _level(rc, cfg, tag)
            b = detection_boundary(tag, cfg, L, target, reps, rc.get("tol_rel", 0.05), seed,
                                   spread=rc.get("spread", "spike"), workers=workers,
                                   calib_reps=rc.get("calib_reps", 2000))
            rows.append([tag, eps, L, b.rho_star, b.bracket[0], b.bracket[1], b.iterations, target])
    return cols, rows


def cmd_compare(rc: RunConfig, seed: int, workers: int):
    if "rho_grid" not in rc.options:
        raise ConfigError("missing required field: rho_grid")
    cols = ["rho", "protocol", "level", "power", "se", "critical_value"]
    protocols = _protocols(rc, PROTOCOLS)
    if any(t in ADAPTIVE_PROTOCOLS for t in protocols):
        raise ConfigError("compare runs single-level protocols only")
    L = rc.get("L") or optimal_resolution(rc.model, False)
    table = compare_protocols(rc.model, L, rc.options["rho_grid"], rc.get("reps", 1000), seed,
                              protocols=protocols, spread=rc.get("spread", "spike"), workers=workers,
                              calib_reps=rc.get("calib_reps", 2000))
    return cols, [[r.rho, r.protocol, L, r.power, r.se, r.critical_value] for r in table]


def cmd_adaptive(rc: RunConfig, seed: int, workers: int):
    cols = ["protocol", "levels", "low_set", "high_set", "kappa_low", "kappa_high",
            "composed_epsilon", "type_i", "type_ii", "se_i", "se_ii"]
    rows = []
    for tag in _protocols(rc, ADAPTIVE_PROTOCOLS):
        if tag not in ADAPTIVE_PROTOCOLS:
            raise ConfigError(f"adaptive command needs adaptive protocols, got {tag!r}")
        grid = _grid_for(rc, rc.model, tag)
        test = calibrate_test(tag, rc.model, grid, rc.get("calib_reps", 2000), seed, workers)
        sig = _signal(rc, rc.get("L") or max(grid.levels), seed)
        r = estimate_risk(tag, rc.model, grid, sig, rc.get("reps", 2000), seed, workers=workers, calibrated=test)
        rows.append([tag, " ".join(map(str, grid.levels)), " ".join(map(str, grid.low_set)),
                     " ".join(map(str, grid.high_set)), *test.critical_values,
                     test.procedure.composed_epsilon(), r.type_i, r.type_ii, r.se_i, r.se_ii])
    return cols, rows


_DISPATCH = {
    "rates": cmd_rates, "regimes": cmd_regimes, "calibrate": cmd_calibrate, "risk": cmd_risk,
    "boundary": cmd_boundary, "compare": cmd_compare, "adaptive": cmd_adaptive,
}


def run(command: str, config_path: str | Path, out_dir: str | Path = ".", *, workers: int = 1,
        seed: int | None = None) -> int:
    """Run one command and write ``<out_dir>/<command>.csv`` plus its JSON sidecar.

    :return: process exit code
    """
    try:
        if command not in _DISPATCH:
            raise ConfigError(f"unknown command {command!r}")
        rc = load_config(config_path)
        if seed is None:
            seed = rc.get("seed", 0)
        if not 0 <= seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if workers < 1:
            raise ConfigError("workers must be positive")
        cols, rows = _DISPATCH[command](rc, seed, workers)
        provenance = {k: v for k, v in _provenance(rc).items() if k != "seed"}
        note = RATE_NOTE if command in ("rates", "regimes") else None
        write_csv(Path(out_dir) / f"{command}.csv", cols, rows, command=command, config=provenance,
                  seed=seed, note=note)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (BracketError, RuntimeError, ValueError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3
    return 0


def figure2_eps_grid(points: int = 50) -> np.ndarray:
    """Log grid on ``(1/N, 1]`` shared by both curve configurations."""
    lowest = max(1.0 / (n * m) for n, m in FIGURE2_CONFIGS)
    return np.geomspace(lowest * 1.01, 1.0, points)


def emit_figure2_bundle(output_dir: str | Path, points: int = 50) -> list[Path]:
    """Rate curves for two ``(n, m)`` configurations and four smoothness levels.

    Writes one CSV per ``(n, m, s, mode)``, 16 in total, over the common
    grid of :func:`figure2_eps_grid`, plus a gnuplot script plotting them.

    :raises OSError: if ``output_dir`` cannot be written
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: list[Path] = []
    plots: list[str] = []
    eps_grid = figure2_eps_grid(points)
    for n, m in FIGURE2_CONFIGS:
        for s in FIGURE2_SMOOTHNESS:
            base = ModelConfig(m=m, n=n, sigma=1.0, s=s, epsilon=1.0, delta=1e-3, alpha=0.05)
            for shared in (False, True):
                mode = "shared" if shared else "local"
                name = f"rate_n{n}_m{m}_s{s:g}_{mode}.csv"
                rows = []
                for eps in eps_grid:
                    rep = classify_regime(base.with_(epsilon=float(eps)), shared)
                    rows.append([float(eps), rep.rho_squared, rep.regime_id])
                cfg = {"n": n, "m": m, "sigma": 1.0, "s": s, "shared": shared}
                p, _ = write_csv(out / name, ["epsilon", "rho2", "regime_id"], rows,
                                 command="figure2", config=cfg, seed=0, sidecar=False,
                                 note=RATE_NOTE)
                paths.append(p)
                plots.append(f"'{name}' using 1:2 with lines title 'n={n} m={m} s={s:g} {mode}'")
    script = out / "figure2.gp"
    script.write_text(
        "set datafile separator ','\nset datafile commentschars '#'\nset key autotitle columnhead\n"
        "set logscale xy\nset xlabel 'epsilon'\nset ylabel 'rho^2'\n"
        "plot " + ", \\\n     ".join(plots) + "\n",
        encoding="utf-8",
    )
    return paths + [script]


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="fedpriv", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="key=value or JSON config file")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--seed", type=int, default=None, help="unsigned 64-bit seed (overrides the config)")
    fig = sub.add_parser("figure2", help="write the smoothness rate-curve bundle")
    fig.add_argument("--out", default=".", help="output directory")
    args = parser.parse_args(argv)
    if args.command == "figure2":
        try:
            for path in emit_figure2_bundle(args.out):
                print(path)
        except OSError as exc:
            print(f"runtime error: {exc}", file=sys.stderr)
            return 3
        return 0
    return run(args.command, args.config, args.out, workers=args.workers, seed=args.seed)


if __name__ == "__main__":
    sys.exit(main())

"""Flat ``key = value`` scenario files with one section per command.

Example::

    [run]
    command = pde
    output_dir = out/pde
    seed = 7

    [pde]
    b0 = 1e-3
    grid_n = 1200

Only the ``[run]`` section and the section named by ``command`` are read; the
other sections may hold settings for other commands and are validated too.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from typing import Any, Callable

from ..errors import ConfigurationError

COMMANDS = ("spectrum", "ode", "pde", "verify", "sweep")
DEFAULT_SEED = 0x57EFA


@dataclass(frozen=True)
class Param:
    kind: str  # int, float, bool, enum, floats, ints
    default: Any
    help: str
    choices: tuple = ()
    check: Callable[[Any], bool] | None = None
    rule: str = ""


def _pos(x) -> bool:
    return x > 0


def _nonneg(x) -> bool:
    return x >= 0


SCHEMAS: dict[str, dict[str, Param]] = {
    "spectrum": {
        "b": Param("float", 1e-4, "scale parameter of H_b", check=_nonneg, rule=">= 0"),
        "K": Param("int", 3, "number of modes", check=_pos, rule="> 0"),
        "n": Param("int", 3000, "spectral grid nodes", check=lambda x: x >= 64, rule=">= 64"),
        "z_max": Param("float", 12.0, "outer radius in z", check=_pos, rule="> 0"),
        "sign": Param("enum", "minus", "weight sign", ("minus", "plus")),
        "gap_trials": Param("int", 0, "random trials for the gap test (0 = skip)",
                            check=_nonneg, rule=">= 0"),
    },
    "ode": {
        "regime": Param("enum", "melt", "reduced system", ("melt", "freeze")),
        "k": Param("int", 0, "excitation index", check=_nonneg, rule=">= 0"),
        "b0": Param("float", 0.05, "initial b for the k = 0 melting law",
                    check=lambda x: 0 < x < 0.1, rule="in (0, 0.1)"),
        "s0": Param("float", 50.0, "initial renormalised time (k >= 1, freezing)",
                    check=lambda x: x > math.e, rule="> e"),
        "s_end_ratio": Param("float", 1e3, "s_end / s0", check=lambda x: x > 1, rule="> 1"),
        "tol": Param("float", 1e-10, "integrator tolerance",
                     check=lambda x: 1e-12 <= x <= 1e-6, rule="in [1e-12, 1e-6]"),
        "per_decade": Param("int", 100, "output samples per decade of s", check=_pos,
                            rule="> 0"),
        "shoot": Param("bool", False, "tune the unstable directions first (k >= 1)"),
        "k_bound": Param("float", 10.0, "shooting box half-width", check=_pos, rule="> 0"),
    },
    "pde": {
        "regime": Param("enum", "melt", "initial data family", ("melt", "freeze")),
        "k": Param("int", 0, "excitation index of the prepared data", check=_nonneg,
                   rule=">= 0"),
        "b0": Param("float", 1e-3, "prepared-data scale",
                    check=lambda x: 0 < x <= 1e-2, rule="in (0, 1e-2]"),
        "amplitude": Param("float", 0.5, "freezing data amplitude", check=_pos, rule="> 0"),
        "lambda0": Param("float", 1.0, "initial radius", check=_pos, rule="> 0"),
        "grid_n": Param("int", 2400, "cells in log y", check=lambda x: x >= 16, rule=">= 16"),
        "ymax": Param("float", 1e8, "outer radius in y", check=lambda x: x >= 40, rule=">= 40"),
        "dt0": Param("float", 5.0, "initial physical step", check=_pos, rule="> 0"),
        "growth": Param("float", 0.0, "allow dt = growth * t", check=_nonneg, rule=">= 0"),
        "t_end": Param("float", math.inf, "stop time", check=_pos, rule="> 0"),
        "s_end_ratio": Param("float", 10.0, "stop at s = ratio * s0", check=_pos, rule="> 0"),
        "lambda_floor": Param("float", 1e-3, "stop when lambda / lambda0 drops below",
                              check=lambda x: 0 <= x < 1, rule="in [0, 1)"),
        "scheme": Param("enum", "euler", "time scheme", ("euler", "trapezoid")),
        "every": Param("int", 20, "diagnostics interval in steps", check=_pos, rule="> 0"),
        "project_every": Param("int", 20, "projection interval (0 = off)", check=_nonneg,
                               rule=">= 0"),
        "max_steps": Param("int", 200000, "step budget", check=_pos, rule="> 0"),
    },
    "verify": {
        "quick": Param("bool", True, "use reduced resolutions"),
    },
    "sweep": {
        "b_list": Param("floats", (1e-3, 1e-4, 1e-5), "values of b",
                        check=lambda v: len(v) > 0 and all(x > 0 for x in v),
                        rule="nonempty, all > 0"),
        "k_list": Param("ints", (0, 1, 2), "mode indices",
                        check=lambda v: len(v) > 0 and all(x >= 0 for x in v),
                        rule="nonempty, all >= 0"),
        "n": Param("int", 3000, "spectral grid nodes", check=lambda x: x >= 64, rule=">= 64"),
        "workers": Param("int", 0, "worker processes (0 = from STEFAN_LAB_THREADS or 1)",
                         check=_nonneg, rule=">= 0"),
    },
}

RUN_KEYS = {"command", "output_dir", "seed"}


@dataclass
class ScenarioConfig:
    command: str
    parameters: dict[str, Any] = field(default_factory=dict)
    output_dir: str = "stefan_lab_out"
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigurationError(f"command: unknown command {self.command!r}")


def _format(kind: str, value: Any) -> str:
    if kind == "float":
        return repr(float(value))
    if kind == "bool":
        return "true" if value else "false"
    if kind == "floats":
        return ", ".join(repr(float(v)) for v in value)
    if kind == "ints":
        return ", ".join(str(int(v)) for v in value)
    return str(value)


def _convert(p: Param, raw: str) -> Any:
    raw = raw.strip()
    if p.kind == "int":
        return int(raw)
    if p.kind == "float":
        return float(raw)
    if p.kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if p.kind == "enum":
        if raw not in p.choices:
            raise ValueError(f"expected one of {', '.join(p.choices)}, got {raw!r}")
        return raw
    if p.kind == "floats":
        return tuple(float(x) for x in raw.split(",") if x.strip())
    if p.kind == "ints":
        return tuple(int(x) for x in raw.split(",") if x.strip())
    raise ValueError(f"unsupported kind {p.kind}")


def defaults(command: str) -> dict[str, Any]:
    return {k: p.default for k, p in SCHEMAS[command].items()}


def validate_parameters(command: str, raw: dict[str, Any], errors: list[str],
                        section: str | None = None) -> dict[str, Any]:
    """Convert and check ``raw`` against the schema; problems are appended to ``errors``."""
    section = section or command
    schema = SCHEMAS[command]
    out = defaults(command)
    for key, value in raw.items():
        if key not in schema:
            errors.append(f"{section}.{key}: unknown key")
            continue
        p = schema[key]
        try:
            v = _convert(p, value) if isinstance(value, str) else _coerce(p, value)
        except (TypeError, ValueError) as exc:
            errors.append(f"{section}.{key}: type mismatch ({exc})")
            continue
        if p.check is not None and not p.check(v):
            errors.append(f"{section}.{key}: value {value!r} violates {p.rule}")
            continue
        out[key] = v
    return out


def _coerce(p: Param, value: Any) -> Any:
    if p.kind == "int":
        if isinstance(value, bool) or int(value) != value:
            raise ValueError(f"not an integer: {value!r}")
        return int(value)
    if p.kind == "float":
        if isinstance(value, bool):
            raise ValueError(f"not a real: {value!r}")
        return float(value)
    if p.kind == "bool":
        if not isinstance(value, bool):
            raise ValueError(f"not a boolean: {value!r}")
        return value
    if p.kind == "enum":
        if value not in p.choices:
            raise ValueError(f"expected one of {', '.join(p.choices)}, got {value!r}")
        return value
    if p.kind == "floats":
        return tuple(float(x) for x in value)
    if p.kind == "ints":
        return tuple(int(x) for x in value)
    raise ValueError(f"unsupported kind {p.kind}")


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, strict=True)
    cp.optionxform = str  # keys are case sensitive (K vs k)
    return cp


def parse_config(text: str, command: str | None = None) -> ScenarioConfig:
    """Parse and validate; every problem is reported in a single ConfigurationError."""
    cp = _parser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from exc
    errors: list[str] = []
    run = dict(cp["run"]) if cp.has_section("run") else {}
    for key in run:
        if key not in RUN_KEYS:
            errors.append(f"run.{key}: unknown key")
    cmd = command or run.get("command")
    if cmd is None:
        errors.append("run.command: missing required key")
    elif cmd not in COMMANDS:
        errors.append(f"run.command: unknown command {cmd!r}")
    seed = DEFAULT_SEED
    if "seed" in run:
        try:
            seed = int(run["seed"])
            if seed < 0:
                errors.append("run.seed: must be >= 0")
        except ValueError:
            errors.append(f"run.seed: type mismatch (not an integer: {run['seed']!r})")
    for sec in cp.sections():
        if sec != "run" and sec not in COMMANDS:
            errors.append(f"{sec}: unknown section")
    params: dict[str, Any] = {}
    for sec in cp.sections():
        if sec in COMMANDS:
            vals = validate_parameters(sec, dict(cp[sec]), errors)
            if sec == cmd:
                params = vals
    if cmd in COMMANDS and not cp.has_section(cmd):
        params = defaults(cmd)
    if errors:
        raise ConfigurationError("invalid config:\n  " + "\n  ".join(errors))
    return ScenarioConfig(cmd, params, run.get("output_dir", "stefan_lab_out"), seed)


def serialize_config(cfg: ScenarioConfig) -> str:
    lines = ["[run]", f"command = {cfg.command}", f"output_dir = {cfg.output_dir}",
             f"seed = {cfg.seed}", "", f"[{cfg.command}]"]
    schema = SCHEMAS[cfg.command]
    for key in schema:
        if key in cfg.parameters:
            lines.append(f"{key} = {_format(schema[key].kind, cfg.parameters[key])}")
    return "\n".join(lines) + "\n"


def with_overrides(cfg: ScenarioConfig, overrides: dict[str, str]) -> ScenarioConfig:
    """Apply ``--key value`` pairs from the command line (dashes map to underscores)."""
    errors: list[str] = []
    raw = {k.replace("-", "_"): v for k, v in overrides.items()}
    run_over = {k: raw.pop(k) for k in list(raw) if k in ("output_dir", "seed")}
    merged = {k: _format(SCHEMAS[cfg.command][k].kind, v) for k, v in cfg.parameters.items()}
    merged.update(raw)
    params = validate_parameters(cfg.command, merged, errors, section="cli")
    seed = cfg.seed
    if "seed" in run_over:
        try:
            seed = int(run_over["seed"])
        except ValueError:
            errors.append(f"cli.seed: type mismatch ({run_over['seed']!r})")
    if errors:
        raise ConfigurationError("invalid arguments:\n  " + "\n  ".join(errors))
    return ScenarioConfig(cfg.command, params, run_over.get("output_dir", cfg.output_dir), seed)

"""``stefan-lab <command> [--config FILE] [--key value ...]``.

Any ``--key value`` pair not listed below overrides the command's parameter
of the same name (dashes and underscores are interchangeable).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..errors import ConfigurationError, StefanLabError
from .config import COMMANDS, SCHEMAS, ScenarioConfig, defaults, parse_config, with_overrides
from .scenarios import run_scenario


def _parameter_help() -> str:
    lines = ["parameters per command (defaults in brackets):"]
    for cmd in COMMANDS:
        lines.append(f"  {cmd}:")
        for key, p in SCHEMAS[cmd].items():
            choices = f" {{{', '.join(p.choices)}}}" if p.choices else ""
            lines.append(f"    --{key.replace('_', '-')}{choices} [{p.default}] {p.help}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="stefan-lab", allow_abbrev=False,
        description="Spectral, reduced-ODE and PDE experiments for the radial Stefan problem.",
        epilog=_parameter_help() + "\n\nexit codes: 0 ok, 1 failed checks or I/O, "
               "2 configuration, 3 numerical, 4 regime violation",
        formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", type=Path, help="flat key = value file with [run] and "
                                                "per-command sections")
    ap.add_argument("--output-dir", help="directory for CSV and JSON outputs")
    ap.add_argument("--seed", type=int, help="seed for randomized tests")
    ap.add_argument("--quiet", action="store_true", help="print only the exit summary")
    return ap


def _pairs(extra: list[str]) -> dict[str, str]:
    """``--key value`` or ``--key=value`` tokens into a dict."""
    out: dict[str, str] = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or tok == "--":
            raise ConfigurationError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise ConfigurationError(f"--{key}: missing value")
            i += 1
            value = extra[i]
        out[key] = value
        i += 1
    return out


def load_config(command: str, config_path: Path | None, overrides: dict[str, str]
                ) -> ScenarioConfig:
    if config_path is not None:
        try:
            text = config_path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {config_path}: {exc}") from exc
        cfg = parse_config(text, command)
    else:
        cfg = ScenarioConfig(command, defaults(command))
    return with_overrides(cfg, overrides)


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args, extra = ap.parse_known_args(argv)
    try:
        over = _pairs(extra)
        if args.output_dir is not None:
            over["output_dir"] = args.output_dir
        if args.seed is not None:
            over["seed"] = str(args.seed)
        cfg = load_config(args.command, args.config, over)
    except ConfigurationError as exc:
        print(f"stefan-lab: {exc}", file=sys.stderr)
        return exc.exit_code
    echo = None if args.quiet else print
    try:
        report = run_scenario(cfg, echo=echo)
    except StefanLabError as exc:  # I/O failures while writing outputs
        print(f"stefan-lab: {exc}", file=sys.stderr)
        return exc.exit_code
    if report.error:
        print(f"stefan-lab: {report.error}", file=sys.stderr)
    brief = {k: v for k, v in report.summary.items() if k != "config"}
    if not args.quiet:
        print(json.dumps(brief, indent=2, default=str))
    for kind, path in report.files.items():
        print(f"{kind}: {path}")
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())

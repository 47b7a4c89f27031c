"""Command-line front end for the experiment presets.

Usage::

    sparsegate <preset> [--config PATH] [--seed N] [--out PATH]
                        [--epsilon FLOAT|calibrate] [--svg PATH] [--jobs N]

Config files are flat ``key=value`` lines (blank lines and ``#`` comments
ignored) using the field names of ExperimentConfig; flags override file
values. The CSV report goes to ``--out`` or stdout.

Exit codes: 0 success, 1 runtime failure (calibration, singular geometry,
I/O), 2 configuration or usage error. Failures print one machine-readable
``error: <Kind>: <message>`` line to stderr.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from sparsegate.experiments import (
    PRESETS,
    ConfigError,
    config_from_mapping,
    report_to_csv,
    run_preset,
)
from sparsegate.svg import render_report

__all__ = ["main", "parse_config_file"]

_PRESET_HELP = {
    "contrastive-sweep": "clean/adversarial contrastive loss vs purification level",
    "gamma-sweep": "leakage statistics gamma1/gamma2 vs purification level",
    "supervised-sweep": "supervised robustness gap vs purification level",
    "downstream-sweep": "downstream robustness inheritance vs pre-training purification",
    "verify": "run the property battery and report measured values",
}


def parse_config_file(path) -> dict:
    """Flat key=value parser; unknown keys are rejected later by the config."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    mapping: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key = key.strip()
        if key in mapping:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        mapping[key] = value.strip()
    return mapping


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsegate",
        description="Monte Carlo experiments on gated networks over sparse features.",
    )
    sub = parser.add_subparsers(dest="preset", required=True, metavar="preset")
    for name in PRESETS:
        sp = sub.add_parser(name, help=_PRESET_HELP[name])
        sp.add_argument("--config", metavar="PATH", help="key=value config file")
        sp.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        sp.add_argument("--out", metavar="PATH", help="write the CSV report here instead of stdout")
        sp.add_argument("--epsilon", metavar="FLOAT|calibrate", help="attack budget override")
        sp.add_argument("--svg", metavar="PATH", help="also render a line chart")
        sp.add_argument("--jobs", type=int, help="parallel worker processes (default 1)")
    return parser


def main(argv=None) -> int:
    try:
        ns = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse printed its own message
        return int(exc.code or 0)
    try:
        mapping = parse_config_file(ns.config) if ns.config else {}
        overrides = (
            ("seed", ns.seed),
            ("output_path", ns.out),
            ("epsilon", ns.epsilon),
            ("svg_path", ns.svg),
            ("jobs", ns.jobs),
        )
        for key, value in overrides:
            if value is not None:
                mapping[key] = value
        config = config_from_mapping(ns.preset, mapping)
        if config.svg_path and config.preset == "verify":
            raise ConfigError("the verify preset has no chart; drop --svg")
        report = run_preset(config)
        text = report_to_csv(report)
        if config.output_path:
            Path(config.output_path).write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(text)
        if config.svg_path:
            Path(config.svg_path).write_text(render_report(report), encoding="utf-8")
        return 0
    except ConfigError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure with a machine-readable line
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``advtrans <subcommand> --config <path> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data-format error,
4 phase failure (the report on disk is marked partial).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import SWEEP_PARAMETERS, load_config, preset_names, schema_text
from .errors import ConfigurationError, FormatError
from .harness import (PhaseFailure, export_models, read_report, run_phases, write_curve_csv,
                      write_report)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_PHASE = 0, 2, 3, 4

SUBCOMMANDS = {
    "pretrain-fb": ("data", "pretrain-fb"),
    "train-defense": ("data", "pretrain-fb", "train-defense"),
    "attack": ("data", "pretrain-fb", "train-fa", "train-defense", "attack"),
    "evaluate": ("data", "pretrain-fb", "train-fa", "undefended", "baseline", "train-defense",
                 "attack", "sweep", "diagnostics"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="advtrans", description="Adversarial-transformation defense laboratory.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("pretrain-fb", "train-defense", "attack", "evaluate", "sweep", "report"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=name != "report",
                       help="INI file, or preset:<name> for a bundled preset")
        s.add_argument("--out", help="output directory (default runs/<experiment name>)")
        s.add_argument("--seed", type=int, help="override experiment.seed")
        s.add_argument("--threads", type=int, default=1,
                       help="accepted for interface compatibility; work runs on one thread")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "sweep":
            s.add_argument("--parameter", required=True, choices=SWEEP_PARAMETERS)
            s.add_argument("--values", help="comma-separated values (default: from the config)")
    sub.add_parser("schema", help="print the configuration schema")
    sub.add_parser("presets", help="list bundled presets")
    return p


def _parse_values(parameter: str, raw: str | None):
    if raw is None:
        return None
    cast = float if parameter == "defense.delta" else int
    try:
        values = [cast(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(f"--values: cannot parse {raw!r}") from None
    if not values:
        raise ConfigurationError("--values: empty list")
    return values


def _out_dir(args, cfg) -> Path:
    return Path(args.out) if args.out else Path("runs") / cfg.experiment.name


def _summary(report: dict) -> str:
    keys = ("status", "standard_accuracy", "worst_case", "best_attack", "worst_case_bpda", "best_bpda_attack")
    return json.dumps({k: report.get(k) for k in keys}, sort_keys=True)


def _run(args) -> int:
    if args.command == "schema":
        print(schema_text())
        return EXIT_OK
    if args.command == "presets":
        print("\n".join(preset_names()))
        return EXIT_OK
    if args.threads < 1:
        raise ConfigurationError("--threads: must be >= 1")
    if args.command == "report":
        if not args.out:
            raise ConfigurationError("report: --out is required")
        path = Path(args.out) / "report.json"
        report = read_report(path)
        write_report(report, path)
        print(_summary(report))
        return EXIT_OK

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = _out_dir(args, cfg)
    if args.command == "sweep":
        report, exp = run_phases(cfg, out, ("data", "pretrain-fb", "train-fa", "train-defense"), write=False)
        curve = exp.sweep(args.parameter, _parse_values(args.parameter, args.values))
        path = write_curve_csv(curve, out / "curves" / f"{args.parameter}.csv")
        print(path)
        return EXIT_OK
    phases = SUBCOMMANDS[args.command]
    if args.command in ("pretrain-fb", "train-defense"):
        report, exp = run_phases(cfg, out, phases, write=False)
        names = ["f_b"] if args.command == "pretrain-fb" else ["f_b", "f_a_defense"]
        print(json.dumps(export_models(exp, names), sort_keys=True))
        return EXIT_OK
    report, _ = run_phases(cfg, out, phases)
    print(_summary(report))
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return _run(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except PhaseFailure as exc:
        print(f"phase failure: {exc}", file=sys.stderr)
        return EXIT_PHASE


if __name__ == "__main__":
    sys.exit(main())

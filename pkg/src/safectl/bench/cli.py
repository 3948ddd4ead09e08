"""Command-line entry point: ``safectl run | verify | emit``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..errors import ConfigInvalid, IoError
from .config import load_config, preset
from .experiments import run
from .report import FORMATS, emit, load_report
from .verify import SUITES, verify


def _seeds(text: str):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("seeds must be comma-separated integers")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="safectl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="YAML or JSON experiment config")
    src.add_argument("--preset", help="run a preset by experiment id")
    r.add_argument("--seeds", type=_seeds, help="comma-separated seeds overriding the config")
    r.add_argument("--out", help="output directory overriding the config")
    r.add_argument("--parallel", type=int, default=1, help="worker processes (1 = reproducible mode)")
    v = sub.add_parser("verify", help="run property suites")
    v.add_argument("--suite", default="all", choices=SUITES)
    e = sub.add_parser("emit", help="re-emit a saved report in another format")
    e.add_argument("--format", required=True)
    e.add_argument("--report", default="report.json", help="path to report.json")
    e.add_argument("--out", help="output directory (default: next to the report)")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = load_config(args.config) if args.config else preset(args.preset)
            if args.seeds is not None:
                cfg = cfg.with_seeds(args.seeds)
            report = run(cfg, out_dir=args.out, parallel=args.parallel)
            print(json.dumps(report.summary, indent=1, sort_keys=True))
            return 0
        if args.command == "verify":
            summary = verify(args.suite)
            print("\n".join(summary.lines()))
            return 0 if summary.passed else 1
        if args.format not in FORMATS:
            raise ConfigInvalid(f"unknown format {args.format!r}; expected one of {list(FORMATS)}", "format")
        report = load_report(args.report)
        path = emit(report, args.format, args.out or Path(args.report).parent)
        print(path)
        return 0
    except (ConfigInvalid, IoError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

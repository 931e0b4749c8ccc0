"""Command-line entry point: ``run``, ``verify`` and ``report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness import ConfigError, ExperimentConfig, format_summary, report, run_experiment
from .verify import SCOPES, verify_suite

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _cmd_run(args) -> int:
    try:
        cfg = ExperimentConfig.load(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out) if args.out else Path("runs") / cfg.name
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    arts = run_experiment(cfg, out, seeds)
    print(format_summary(cfg.name, arts.summary))
    print(f"artifacts written to {out}")
    if not arts.ok:
        for seed, err in arts.failed_seeds.items():
            print(f"seed {seed} incomplete: {err}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def _cmd_verify(args) -> int:
    results = verify_suite(args.scope, args.seed, quick=args.quick)
    for r in results:
        print(r.line())
    if args.json:
        Path(args.json).write_text(json.dumps([r.to_json() for r in results], indent=2) + "\n")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


def _cmd_report(args) -> int:
    try:
        rows = report(args.artifacts_dir)
    except (FileNotFoundError, ConfigError) as exc:
        print(f"report error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print("values in percent, mean ± standard error over seeds, final checkpoint")
    for name, summary in rows:
        print(format_summary(name, summary))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clbounds", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train a task sequence and compute bounds")
    p.add_argument("config", help="JSON experiment config")
    p.add_argument("--out", help="artifact directory (default runs/<name>)")
    p.add_argument("--seeds", help="comma-separated seeds overriding the config")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("verify", help="finite-space property sweeps and gradient checks")
    p.add_argument("--scope", choices=SCOPES, default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true", help="reduced sample counts")
    p.add_argument("--json", help="also write results to this file")
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("report", help="summarize run artifacts")
    p.add_argument("artifacts_dir")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: run experiments, price scenarios, verify runs.

Exit codes: 0 success, 1 divergence / invariant / verification failure,
2 malformed config or scenario.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError, IntegrityError, ScenarioError
from .experiment import run_experiment, verify_run
from . import perf as perf_mod

log = logging.getLogger("lagsgd")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lagsgd", description=__doc__)
    parser.add_argument("--log-level", default="warning", help="logging level (debug, info, warning, ...)")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute an experiment config")
    run_p.add_argument("config", help="path to the experiment .ini file")
    run_p.add_argument("--out", default=None, help="output directory override")
    run_p.add_argument("--seed", type=int, default=None, help="run seed override")

    perf_p = sub.add_parser("perf", help="analyze a pipeline scenario file")
    perf_p.add_argument("scenario", help="path to the scenario file")
    perf_p.add_argument("--out", default=None, help="directory for timeline.csv (default: alongside scenario)")

    verify_p = sub.add_parser("verify", help="re-check a finished run directory")
    verify_p.add_argument("rundir", help="directory produced by 'lagsgd run'")
    return parser


def _cmd_run(args) -> int:
    result = run_experiment(args.config, out_override=args.out, seed_override=args.seed)
    print((result.out_dir / "summary.txt").read_text(), end="")
    for failure in result.failures:
        print(f"FAIL: {failure}", file=sys.stderr)
    return result.exit_code


def _cmd_perf(args) -> int:
    loaded = perf_mod.load_scenario(args.scenario)
    report = perf_mod.analyze_scenario(loaded.scenario)
    for line in report.summary_lines():
        print(line)
    out_dir = Path(args.out) if args.out else Path(args.scenario).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    timeline_path = out_dir / "timeline.csv"
    perf_mod.write_timeline_csv(report.timeline, timeline_path)
    print(f"timeline written to {timeline_path}")
    return 0


def _cmd_verify(args) -> int:
    report = verify_run(args.rundir)
    for line in report.summary_lines():
        print(line)
    return 0 if report.passed else 1


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.WARNING))
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "perf":
            return _cmd_perf(args)
        return _cmd_verify(args)
    except (ConfigError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

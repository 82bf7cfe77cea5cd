"""Command line entry point: ``stochquant run|validate|list``."""
import argparse
import json
import os
import sys
from pathlib import Path

from .runner import EXIT_OK, EXIT_PARSE, EXIT_VALIDATION, run_scenario
from .scenario import ScenarioParseError, ScenarioValidationError, list_scenarios, load

OUT_ENV = "STOCHQUANT_OUT"


def parse_args(argv=None):
    parser = argparse.ArgumentParser(
        prog="stochquant",
        description="Run and check stochastic trajectory verification scenarios.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario file or bundled scenario")
    run.add_argument("scenario", help="YAML path or bundled scenario name")
    run.add_argument("--out", default=None,
                     help=f"output directory (default: ${OUT_ENV}/<name> or runs/<name>)")
    run.add_argument("--seed", type=int, default=None, help="override the master seed")
    run.add_argument("--threads", type=int, default=1, help="worker threads for ensembles")

    val = sub.add_parser("validate", help="parse and validate without computing")
    val.add_argument("scenario")

    sub.add_parser("list", help="list bundled scenarios")
    return parser.parse_args(argv)


def _load(name):
    try:
        return load(name), None
    except ScenarioParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return None, EXIT_PARSE
    except ScenarioValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return None, EXIT_VALIDATION


def main(argv=None) -> int:
    args = parse_args(argv)
    if args.command == "list":
        for entry in list_scenarios():
            print(f"{entry['name']:<28} {entry['experiment']:<22} {entry['description']}")
        return EXIT_OK

    scenario, code = _load(args.scenario)
    if scenario is None:
        return code

    if args.command == "validate":
        print("ok")
        print(json.dumps(scenario.resolved(), indent=2, default=str))
        return EXIT_OK

    if args.threads < 1:
        print("validation error: --threads: must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    out = args.out or str(Path(os.environ.get(OUT_ENV, "runs")) / scenario.name)
    result = run_scenario(scenario, out, seed=args.seed, workers=args.threads)
    for v in result.verdicts:
        z = "" if v.z is None else f"  z={v.z:+.2f}"
        print(f"[{'PASS' if v.passed else 'FAIL'}] {v.name}: {v.value:.6g} ({v.tolerance}){z}")
    diag = result.manifest.get("diagnostics")
    if diag:
        print(diag, file=sys.stderr)
    print(f"status {result.manifest['status']}, exit {result.exit_code}, outputs in {out}")
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())

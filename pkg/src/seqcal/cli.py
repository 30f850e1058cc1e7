"""Command-line entry point.

    seqcal run <spec.ini>              run an experiment, write results
    seqcal report <results_dir>        summarize results into plot-ready CSVs
    seqcal simulate <testbed> <z...>   evaluate a testbed once (natural units)

Exit codes: 0 success, 1 partial failure or empty results, 2 invalid input.
The worker count in a spec can be overridden with ``SEQCAL_WORKERS``.
"""
from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .errors import ConfigError
from .experiment import load_spec, run_experiment
from .report import format_report, load_rows, write_report
from .testbeds import TESTBEDS, get_testbed


def cmd_run(spec_file) -> int:
    try:
        spec = load_spec(spec_file)
        results = run_experiment(spec)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    failed = [r for r in results if r.status != "ok"]
    for r in failed:
        print(f"run failed: replicate {r.replicate} method {r.method}: {r.error}", file=sys.stderr)
    print(f"wrote {spec.output}")
    return 1 if failed else 0


def cmd_report(results_dir) -> int:
    if not load_rows(results_dir):
        print(f"error: no results in {results_dir}", file=sys.stderr)
        return 1
    print(format_report(write_report(results_dir)))
    return 0


def cmd_simulate(testbed: str, values, discrepancy: bool = False) -> int:
    if testbed not in TESTBEDS:
        print(f"error: unknown testbed {testbed!r}; known: {', '.join(sorted(TESTBEDS))}", file=sys.stderr)
        return 2
    model = get_testbed(testbed, **({"discrepancy": True} if discrepancy else {}))
    if len(values) != model.q + model.p:
        print(f"error: {testbed} takes {model.q} design inputs and {model.p} parameters", file=sys.stderr)
        return 2
    x = np.array(values[:model.q]).reshape(1, -1)
    th = np.array(values[model.q:]).reshape(1, -1)
    out = np.asarray(model.eta(x, th), dtype=float).ravel()[0]
    if discrepancy and model.bias is not None:
        out += float(np.asarray(model.bias(x)).ravel()[0])
    print(repr(float(out)))
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="seqcal", description="Sequential design for Bayesian calibration.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment spec")
    p_run.add_argument("spec")
    p_rep = sub.add_parser("report", help="summarize a results directory")
    p_rep.add_argument("results_dir")
    p_sim = sub.add_parser("simulate", help="evaluate a built-in testbed once")
    p_sim.add_argument("testbed")
    p_sim.add_argument("z", nargs="+", type=float)
    p_sim.add_argument("--discrepancy", action="store_true")
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    if args.command == "run":
        return cmd_run(args.spec)
    if args.command == "report":
        return cmd_report(args.results_dir)
    return cmd_simulate(args.testbed, args.z, args.discrepancy)


if __name__ == "__main__":
    sys.exit(main())

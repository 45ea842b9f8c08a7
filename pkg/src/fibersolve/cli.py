"""Command-line entry point.

``fibersolve run`` solves a case from a config file or from one of the
built-in presets and prints a short run summary.  Exit codes: 0 when the
solve converged, 1 for configuration or usage errors, 2 when the solver
failed to converge.
"""

from __future__ import annotations

import argparse
import sys

from .cases import PRESETS, CaseError, parse_case, run_case


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="fibersolve",
        description="Solve fiber-in-matrix coupling cases.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="solve a case and write its outputs")
    run.add_argument("case", nargs="?", help="path to a case config file")
    run.add_argument(
        "--preset",
        choices=sorted(PRESETS),
        help="use a built-in case instead of a config file",
    )
    run.add_argument(
        "--full",
        action="store_true",
        help="full-size variant (rve preset only)",
    )
    run.add_argument("--out", metavar="DIR", help="directory for output files")
    return parser


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)

    try:
        if args.case and args.preset:
            raise CaseError("give either a config file or --preset, not both")
        if not args.case and not args.preset:
            raise CaseError("give a config file or --preset")
        if args.full and args.preset != "rve":
            raise CaseError("--full only applies to the rve preset")
        if args.preset:
            factory = PRESETS[args.preset]
            config = factory(full=True) if args.preset == "rve" and args.full else factory()
        else:
            try:
                with open(args.case) as fh:
                    text = fh.read()
            except OSError as exc:
                raise CaseError(f"cannot read {args.case}: {exc}") from None
            config = parse_case(text)
    except CaseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    try:
        report = run_case(config, out_dir=args.out)
    except Exception as exc:  # solver-level failure
        print(f"solver error: {exc}", file=sys.stderr)
        return 2

    for line in report.summary_lines():
        print(line)
    return 0 if report.converged else 2


if __name__ == "__main__":
    sys.exit(main())

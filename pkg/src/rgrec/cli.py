"""Command line entry point: ``rgrec <stage|ablation> --config FILE [key=value ...]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or artifact
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import CheckpointError, ConfigError, MissingArtifactError, NumericalError, StaleArtifactError
from .graph import GraphFormatError
from .pipeline import ABLATIONS, STAGES, Pipeline, run_ablation
from .rules import RuleConfigError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rgrec", description="Rule-guided knowledge-graph recommendation pipeline.")
    p.add_argument("command", choices=STAGES + ABLATIONS, help="pipeline stage or ablation sweep")
    p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides (win over the file)")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--threads", type=int, help="torch intra-op threads (1 = bit-exact)")
    p.add_argument("--workspace", help="artifact directory")
    p.add_argument("--strategy", help="rule filtering strategy: cwa, rotate or transe")
    p.add_argument("--no-deps", action="store_true", help="fail instead of running missing upstream stages")
    p.add_argument("--progress", action="store_true", help="show progress bars")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_intermixed_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    bad = [o for o in args.overrides if "=" not in o]
    if bad:
        parser.error(f"overrides must look like key=value, got {bad[0]!r}")
    try:
        cfg = load_config(args.config, args.overrides, seed=args.seed, threads=args.threads,
                          workspace=args.workspace, strategy=args.strategy)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"rgrec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.command in ABLATIONS:
            text = run_ablation(args.command, cfg, not args.no_deps, args.progress,
                                on_setting=lambda s: logging.getLogger("rgrec").info("setting %s", s))
            sys.stdout.write(text)
        else:
            pipe = Pipeline(cfg, not args.no_deps, args.progress)
            d = pipe.run(args.command)
            if args.command == "evaluate":
                sys.stdout.write((d / "report.txt").read_text())
            else:
                print(d)
    except NumericalError as exc:
        print(f"rgrec: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MissingArtifactError, StaleArtifactError, CheckpointError, GraphFormatError,
            RuleConfigError, FileNotFoundError, ValueError) as exc:
        print(f"rgrec: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``uqlab <command> --config FILE [--seed N] [--out DIR] [--workers K]``.

Exit codes: 0 success, 2 configuration error, 3 missing prerequisite,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import config as config_mod
from . import pipeline
from .data import DataError
from .transformer import ConfigError, TrainingDivergence

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED = 0, 2, 3, 4
COMMANDS = pipeline.STAGES + ("collapse-demo", "run-all")

log = logging.getLogger("uqlab")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uqlab", description="Uncertainty experiments on clinical token sequences.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", default=None, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    p.add_argument("--out", default=None, help="output directory (overrides config and UQLAB_OUT)")
    p.add_argument("--workers", type=int, default=None, help="worker processes")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = config_mod.load(args.config, seed=args.seed, out=args.out, workers=args.workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "run-all":
            out = pipeline.run_all(cfg)
        else:
            out = pipeline.STAGE_FUNCS[args.command](cfg)
    except pipeline.MissingArtifact as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingDivergence as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, DataError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command in ("report", "run-all", "collapse-demo"):
        print(json.dumps(json.loads((out / "summary.json").read_text()), indent=2))
    else:
        print(f"{args.command}: wrote {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

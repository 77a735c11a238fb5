"""Command-line entry point.

Subcommands: generate, train, eval, gradcheck, visualize. Each takes
``--config <file>`` (JSON) plus repeated ``--set path.to.key=value``
overrides. The XPD_SEED environment variable overrides the config seed.
Exit status: 0 on success, 2 on validation errors, 3 on check failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import RunConfig
from .errors import (CheckpointMismatchError, ConfigurationError, DomainError,
                     GenerationError, PreconditionError, ShapeError)

VALIDATION_ERRORS = (ConfigurationError, ShapeError, DomainError, PreconditionError,
                     CheckpointMismatchError, FileNotFoundError, TypeError,
                     json.JSONDecodeError)


def _build_parser():
    parser = argparse.ArgumentParser(prog="xpd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "train", "eval", "gradcheck", "visualize"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted-path config override")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = RunConfig.from_file(args.config, overrides=args.overrides,
                                     seed_env=os.environ.get("XPD_SEED"))
    except VALIDATION_ERRORS as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2

    from . import harness

    try:
        if args.command == "generate":
            manifest = harness.cmd_generate(config)
            print(f"wrote {len(manifest['scenes'])} scenes to {config.dataset}")
        elif args.command == "train":
            ckpt = harness.cmd_train(config)
            print(f"checkpoint: {ckpt}")
        elif args.command == "eval":
            report = harness.cmd_eval(config)
            print(report.table())
        elif args.command == "gradcheck":
            report = harness.cmd_gradcheck(verbose=True)
            if not report.passed:
                return 3
        elif args.command == "visualize":
            out = harness.cmd_visualize(config)
            print(f"images in {out}")
    except VALIDATION_ERRORS as e:
        print(f"validation error: {e}", file=sys.stderr)
        return 2
    except GenerationError as e:
        print(f"generation error: {e}", file=sys.stderr)
        return 1
    except RuntimeError as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

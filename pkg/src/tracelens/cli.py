"""Command-line driver.

    tracelens reproduce --out runs/std
    tracelens gen-data --config my.json --out runs/a
    tracelens train --out runs/a

Every command takes the same flags; ``--seed``, ``--variant`` and ``--k``
override the config file.  Failures print one JSON object to stderr and
exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import __version__
from .config import ConfigError, load_config, save_config
from .pipeline import FingerprintError, MissingArtifactError, Run

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

COMMANDS = {
    "gen-data": ("generate or load the dataset and split it", "gen_data"),
    "train": ("train and write the checkpoint series", "train"),
    "influence": ("select test samples and compute the influence matrix", "influence"),
    "topk": ("write positive and negative top-k rankings", "topk"),
    "validate": ("run the oracle comparison and removal validation", "validate"),
    "analyze": ("write analysis reports and figures", "analyze"),
    "reproduce": ("run every stage in order", "reproduce"),
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="run config JSON (defaults to the built-in standard run)")
    p.add_argument("--seed", type=int, help="global seed, overrides the config")
    p.add_argument("--threads", type=int, default=1, help="worker threads for influence scoring")
    p.add_argument("--variant", choices=("dot", "cosine"), help="influence variant, overrides the config")
    p.add_argument("--k", type=int, help="top-k size (default 100)")
    p.add_argument("--output-only", action="store_true", default=None, help="use output-layer gradients only")
    p.add_argument("--out", metavar="DIR", default="tracelens-out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tracelens", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"tracelens {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (help_text, _) in COMMANDS.items():
        _common(sub.add_parser(name, help=help_text))
    dump = sub.add_parser("show-config", help="print the effective config as JSON")
    _common(dump)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("TRACELENS_LOG", "error").lower()
    logging.basicConfig(
        level=LOG_LEVELS.get(level, logging.ERROR),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _fail(command: str, exc: BaseException, code: int) -> int:
    err = {"command": command, "error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, FingerprintError):
        err.update(artifact=exc.what, expected=exc.expected, actual=exc.actual)
    sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    try:
        config = load_config(args.config).with_overrides(seed=args.seed, variant=args.variant, k=args.k, output_only=args.output_only)
        if args.command == "show-config":
            print(json.dumps({"config_hash": config.hash(), **config.to_dict()}, indent=2, sort_keys=True))
            return 0
        run = Run(config, args.out, threads=args.threads)
        written = getattr(run, COMMANDS[args.command][1])()
    except (ConfigError, ValueError) as exc:
        return _fail(args.command, exc, 2)
    except (FingerprintError, MissingArtifactError) as exc:
        return _fail(args.command, exc, 3)
    except Exception as exc:  # noqa: BLE001
        logging.getLogger(__name__).debug("unhandled error", exc_info=True)
        return _fail(args.command, exc, 1)
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())

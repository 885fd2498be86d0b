"""``fedgai`` command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

from . import experiments as ex
from .config import ConfigError, ExperimentConfig, load_config, validate
from .training import STRATEGIES

logger = logging.getLogger("fedgai")

COMMANDS = ("gen-data", "train-local", "distill", "fed-run", "fuse", "report", "sweep-niter", "sweep-clients")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON experiment config (defaults apply to missing keys)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--jobs", type=int, default=1, help="clients trained concurrently (default 1)")
    common.add_argument("--strategy", choices=STRATEGIES, help="override the aggregation strategy")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="fedgai", description="Federated sketch-style fusion experiments.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "gen-data": "write synthetic designer datasets",
        "train-local": "train a teacher GAN per client",
        "distill": "distil each teacher into a student generator",
        "fed-run": "run a full federated experiment",
        "fuse": "run a style-fusion session between selected clients",
        "report": "collect round records into report/",
        "sweep-niter": "federated runs over local iteration counts",
        "sweep-clients": "federated runs over client counts",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.strategy is not None:
        cfg.strategy = args.strategy
    if args.jobs < 1:
        raise ConfigError("--jobs", "must be >= 1")
    out = cfg.output_dir or os.environ.get("FEDGAI_OUTPUT")
    if not out:
        raise ConfigError("output_dir", "set output_dir in the config or FEDGAI_OUTPUT in the environment")
    cfg = replace(cfg, output_dir=out)
    validate(cfg)
    return cfg


def run(command: str, cfg: ExperimentConfig, jobs: int) -> None:
    layout = ex.Layout(cfg.output_dir).make()
    ex.write_manifest(layout, command, cfg)
    if command == "gen-data":
        ex.gen_data(cfg, layout)
    elif command == "train-local":
        ex.train_local(cfg, layout, jobs)
    elif command == "distill":
        ex.distill(cfg, layout, jobs)
    elif command == "fed-run":
        ex.federated_run(cfg, layout, jobs)
    elif command == "fuse":
        ex.fuse(cfg, layout, jobs)
    elif command == "report":
        ex.report(layout)
    elif command == "sweep-niter":
        ex.sweep_niter(cfg, layout, jobs)
    elif command == "sweep-clients":
        ex.sweep_clients(cfg, layout, jobs)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
    except ConfigError as exc:
        print(f"fedgai: invalid config: {exc}", file=sys.stderr)
        return 2
    try:
        run(args.command, cfg, args.jobs)
    except Exception as exc:  # reported, not re-raised: the exit code carries the failure
        logger.debug("command failed", exc_info=True)
        print(f"fedgai: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

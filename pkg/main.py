"""
DRHG Routing Solver
-------------------
Command-line entry point for the destroy-and-repair routing solver. A learned
repair network re-sequences small hyper-graphs cut out of a TSP tour or a
CVRP route plan, and the search keeps the best solution seen.

Subcommands:
- gen    generate uniform random TSP/CVRP corpora
- label  label a corpus with Held-Karp or local search
- train  supervised training (or fine-tuning with --init)
- solve  run the destroy-and-repair search
- eval   score solutions against best-known objectives
- plot   draw solutions or search snapshots as SVG
"""

import argparse
import os
import sys
from pathlib import Path
from typing import List, Optional

import yaml
from dotenv import load_dotenv
from loguru import logger

from cli.commands import COMMANDS
from cli.manifest import RunManifest, manifest_path_for
from core.errors import DRHGError, UsageError

DEFAULT_CONFIG = "config/config.yaml"
LOG_LEVELS = {"error": "ERROR", "info": "INFO", "debug": "DEBUG"}


def load_config(config_path: str) -> dict:
    """
    Load the solver configuration from a YAML file.

    Args:
        config_path (str): Path to the configuration file.

    Returns:
        dict: Parsed configuration, one section per component.

    Side Effects:
        - Creates the log directory if it does not exist.
    """
    try:
        with open(config_path, "r") as f:
            config = yaml.safe_load(f) or {}

        Path(config.setdefault("app", {}).get("log_dir", "logs")).mkdir(parents=True, exist_ok=True)
        return config
    except Exception as e:
        logger.error(f"Failed to load config: {e}")
        raise


def setup_logging(log_dir: str, level: Optional[str] = None):
    """
    Initialize logging using loguru.

    Log Files:
        - app.log (INFO level, rotated every 10MB, kept for 7 days)
        - error.log (ERROR level, rotated every 10MB, kept for 30 days)

    The stderr level comes from DRHG_LOG (error | info | debug), which may
    also be set in a .env file.
    """
    load_dotenv()
    name = (level or os.getenv("DRHG_LOG", "info")).lower()
    if name not in LOG_LEVELS:
        raise UsageError(f"DRHG_LOG must be one of {', '.join(LOG_LEVELS)}, got {name!r}")
    logger.remove()
    logger.add(sys.stderr, level=LOG_LEVELS[name])
    logger.add(
        f"{log_dir}/app.log",
        rotation="10 MB",
        retention="7 days",
        level="INFO"
    )
    logger.add(
        f"{log_dir}/error.log",
        rotation="10 MB",
        retention="30 days",
        level="ERROR"
    )


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="drhg", description="Destroy-and-repair routing solver with a learned repair network")
    parser.add_argument("--config", default=DEFAULT_CONFIG, help="YAML configuration file")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--data", help="JSON-lines dataset, .tsp/.vrp file, or a directory of them")
        return p

    p = common(sub.add_parser("gen", help="generate uniform random instances"))
    p.add_argument("--kind", choices=["tsp", "cvrp"], required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--count", type=int, default=1)

    p = common(sub.add_parser("label", help="label instances with exact or local-search solutions"))
    p.add_argument("--mode", choices=["exact", "local_search"])

    p = common(sub.add_parser("train", help="train (or fine-tune) the repair network"))
    p.add_argument("--labels")
    p.add_argument("--epochs", type=int)
    p.add_argument("--k-min", type=int)
    p.add_argument("--init", help="checkpoint to fine-tune from")

    for name, text in (("solve", "run destroy-and-repair search"), ("eval", "score solvers against references")):
        p = common(sub.add_parser(name, help=text))
        p.add_argument("--solver", choices=["drhg", "exact", "initial", "labels"])
        p.add_argument("--ckpt")
        p.add_argument("--labels")
        p.add_argument("--iters", type=int)
        p.add_argument("--k-min", type=int)
        p.add_argument("--k-max", type=int)
        p.add_argument("--mode", choices=["greedy", "sample"])
        p.add_argument("--trace", help="directory for per-instance trace CSVs")
        p.add_argument("--snapshots", help="comma-separated iterations to snapshot")
        if name == "eval":
            p.add_argument("--bks")
            p.add_argument("--solutions")

    p = common(sub.add_parser("plot", help="draw solutions or search snapshots"))
    p.add_argument("--solutions")
    p.add_argument("--trace", help="snapshots JSON-lines written by solve")
    p.add_argument("--panels", type=int)
    return parser


def _apply_mode(args, config: dict) -> None:
    # --mode means the rollout mode for solve/eval and the labeller mode for label
    if args.command in ("solve", "eval") and getattr(args, "mode", None):
        config.setdefault("search", {})["mode"] = args.mode


def run(argv: List[str]) -> int:
    try:
        args = build_parser().parse_args(argv)
        config = load_config(args.config)
        setup_logging(config["app"]["log_dir"])
    except UsageError as e:
        logger.error(f"Usage: {e}")
        return 2
    except Exception as e:
        logger.critical(f"Failed to start: {e}")
        return 1

    _apply_mode(args, config)
    manifest = RunManifest(command=args.command, argv=list(argv), config=config, seed=args.seed)
    status, outputs, code = "ok", [], 0
    try:
        logger.info(f"drhg {args.command} started")
        outputs = COMMANDS[args.command](args, config)
    except UsageError as e:
        logger.error(f"Usage: {e}")
        status, code = "usage", 2
    except DRHGError as e:
        logger.critical(f"{args.command} failed: {e}")
        status, code = "failed", 1
    except Exception as e:
        logger.critical(f"{args.command} crashed: {e}")
        status, code = "failed", 1

    if args.out:
        manifest.finish(outputs, status)
        try:
            manifest.write(manifest_path_for(args.out))
        except Exception:
            code = code or 1
    return code


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()

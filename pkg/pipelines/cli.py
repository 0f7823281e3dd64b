"""
`pudding` command line.

Subcommands: toy, search, build-dataset, train, infer, bench.

Exit codes:
- 0 success
- 2 invalid input or configuration
- 3 search or training failure
- 4 storage failure

Usage:
    pudding toy --out toy
    pudding search -c toy/pudding.toml
    pudding build-dataset -c toy/pudding.toml
    pudding train -c toy/pudding.toml --epochs 30
    pudding infer -c toy/pudding.toml
    pudding bench -c toy/pudding.toml --pool-size 1 --pool-size 2
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any

import torch
from dotenv import load_dotenv

from errors import PuddingError
from pipelines.config import RunConfig, load_config
from pipelines.orchestrate import (
    cmd_bench,
    cmd_build_dataset,
    cmd_infer,
    cmd_search,
    cmd_toy,
    cmd_train,
)
from routing.training import LabelMode, LossMode
from scoring.losses import Criterion

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
CRITERIA = [str(c) for c in Criterion]


def configure_logging(log_dir: Path | None, verbose: bool = False) -> None:
    """Console logging, plus ``pudding.log`` in ``log_dir`` when given."""
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    if log_dir is not None:
        log_dir.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_dir / "pudding.log", encoding="utf-8"))
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", type=Path, help="TOML run configuration")
    common.add_argument("--seed", type=int, help="Master seed")
    common.add_argument("--threads", type=int, help="CPU threads for torch")
    common.add_argument("--out", type=Path, help="Output directory")
    common.add_argument(
        "--dry-run",
        action="store_true",
        help="Validate inputs and print the plan without writing outputs",
    )
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")

    parser = argparse.ArgumentParser(
        prog="pudding",
        description="Prompt-routed block omission for decoder-only transformers",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("toy", parents=[common], help="Write the synthetic fixture")

    search = sub.add_parser("search", parents=[common], help="Build the candidate pool")
    search.add_argument("--k", type=int, help="Blocks to omit per set")
    search.add_argument(
        "--criterion",
        action="append",
        choices=CRITERIA,
        help="Search criterion (repeatable)",
    )
    search.add_argument("--two-pass", action="store_true", default=None)

    build = sub.add_parser(
        "build-dataset", parents=[common], help="Label prompts for router training"
    )
    build.add_argument("--criterion", choices=CRITERIA, help="Label criterion")

    train = sub.add_parser("train", parents=[common], help="Train the router")
    train.add_argument("--loss-mode", choices=[str(m) for m in LossMode])
    train.add_argument("--label-mode", choices=[str(m) for m in LabelMode])
    train.add_argument("--epochs", type=int)

    infer = sub.add_parser("infer", parents=[common], help="Routed generation")
    infer.add_argument("--prompts", type=Path, help="Prompt file, one per line")
    infer.add_argument("--max-new-tokens", type=int)
    infer.add_argument("--use-cache", action="store_true", default=None)

    bench = sub.add_parser("bench", parents=[common], help="Benchmarks and ablations")
    bench.add_argument(
        "--pool-size",
        type=int,
        action="append",
        help="Pool size for the ablation (repeatable; enables it)",
    )
    bench.add_argument("--criterion", choices=CRITERIA, help="Static-set criterion")
    return parser


def build_overrides(args: argparse.Namespace) -> dict[str, Any]:
    """Map parsed flags onto RunConfig fields; unset flags stay None."""

    def absolute(p: Path | None) -> Path | None:
        # CLI paths are relative to the working directory, not the TOML file.
        return p.resolve() if p is not None else None

    overrides: dict[str, Any] = {
        "seed": args.seed,
        "threads": args.threads,
        "out_dir": absolute(args.out),
    }
    match args.command:
        case "search":
            overrides.update(k=args.k, criteria=args.criterion, two_pass=args.two_pass)
        case "build-dataset":
            overrides["label_criterion"] = args.criterion
        case "train":
            overrides["train"] = {
                "loss_mode": args.loss_mode,
                "label_mode": args.label_mode,
                "epochs": args.epochs,
            }
        case "infer":
            overrides.update(
                prompts_path=absolute(args.prompts),
                max_new_tokens=args.max_new_tokens,
                use_cache=args.use_cache,
            )
        case "bench":
            overrides["label_criterion"] = args.criterion
            if args.pool_size:
                overrides["bench"] = {
                    "pool_sizes": args.pool_size,
                    "pool_size_ablation": True,
                }
    return overrides


def run(args: argparse.Namespace, config: RunConfig) -> Path:
    match args.command:
        case "toy":
            return cmd_toy(config, args.out or Path("toy"), args.dry_run)
        case "search":
            return cmd_search(config, args.dry_run)
        case "build-dataset":
            return cmd_build_dataset(config, args.dry_run)
        case "train":
            return cmd_train(config, args.dry_run)
        case "infer":
            return cmd_infer(config, args.dry_run)
        case "bench":
            return cmd_bench(config, args.dry_run)
    raise ValueError(f"Unknown command {args.command}")


def main(argv: list[str] | None = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)

    try:
        config = load_config(args.config, build_overrides(args))
        if args.dry_run:
            log_dir = None
        elif args.command == "toy":
            log_dir = args.out or Path("toy")
        else:
            log_dir = config.out_dir
        configure_logging(log_dir, args.verbose)
        if config.threads:
            torch.set_num_threads(config.threads)
        torch.manual_seed(config.seed)
        run(args, config)
    except PuddingError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"\n[ERROR] {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O failure: {e}")
        print(f"\n[ERROR] {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())

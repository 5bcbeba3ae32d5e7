"""
Command-line entry point

    python -m app.cli train-base --config configs/points2d.toml --out runs/p2d
    python -m app.cli distill    --config configs/points2d.toml --out runs/p2d
    python -m app.cli finetune   --config configs/points2d.toml --out runs/p2d --strategy shortft
    python -m app.cli eval       --config configs/points2d.toml --out runs/p2d
    python -m app.cli compare    --config configs/points2d.toml --out runs/p2d --budget-seconds 60
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from app.config import load_experiment_config
from app.schemas import Strategy
from app.services.pipeline_service import ExperimentPipeline

logger = logging.getLogger("app.cli")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2

STRATEGY_NAMES = {
    "vanilla": Strategy.VANILLA,
    "draft-k": Strategy.DRAFT_K,
    "draft_k": Strategy.DRAFT_K,
    "stopgrad": Strategy.STOPGRAD,
    "shortft": Strategy.SHORTFT,
}


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="TOML experiment config")
    parser.add_argument("--out", type=Path, required=True, help="Output directory")
    parser.add_argument("--seed", type=int, default=None, help="Overrides SHORTFT_SEED and the config seed")
    parser.add_argument("--force", action="store_true", help="Overwrite existing outputs")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--progress", action="store_true", help="Show progress bars")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shortft", description="Shortcut-based reward fine-tuning lab")
    commands = parser.add_subparsers(dest="command", required=True)

    _common(commands.add_parser("train-base", help="Train the base denoiser"))
    _common(commands.add_parser("critic", help="Train the frozen critic used by critic rewards"))
    _common(commands.add_parser("distill", help="Distill the shortcut student"))

    finetune = commands.add_parser("finetune", help="Reward fine-tune a LoRA stack")
    _common(finetune)
    finetune.add_argument("--strategy", choices=sorted(STRATEGY_NAMES), default=None)
    finetune.add_argument("--K", type=int, default=None, help="Truncation depth")
    finetune.add_argument("--stages", type=int, default=None, help="ShortFT stage count (must equal k)")

    evaluate = commands.add_parser("eval", help="Score samples of a checkpoint")
    _common(evaluate)
    evaluate.add_argument("--checkpoint", choices=["finetune", "base"], default="finetune")
    evaluate.add_argument("--reward", action="append", default=None, help="Reward preset (repeatable)")
    evaluate.add_argument("--n-eval", type=int, default=None)

    _common(commands.add_parser("gradcheck", help="Finite-difference check of the tape gradients"))

    compare = commands.add_parser("compare", help="Run every strategy under one budget")
    _common(compare)
    compare.add_argument("--budget-seconds", type=float, default=None)
    compare.add_argument("--ablations", action="store_true", help="Add shared-LoRA and single-stage ShortFT")
    return parser


def _finetune_overrides(args, config):
    update = {}
    if args.strategy is not None:
        update["strategy"] = STRATEGY_NAMES[args.strategy]
    if args.K is not None:
        update["K"] = args.K
    if args.stages is not None:
        update["stages"] = args.stages
    return config.finetune.model_copy(update=update)


def run(args: argparse.Namespace) -> int:
    config = load_experiment_config(args.config, seed=args.seed)
    pipeline = ExperimentPipeline(config, args.out, force=args.force, progress=args.progress)

    if args.command == "train-base":
        pipeline.train_base()
    elif args.command == "critic":
        pipeline.train_critic()
    elif args.command == "distill":
        pipeline.distill()
    elif args.command == "finetune":
        pipeline.finetune(_finetune_overrides(args, config))
    elif args.command == "eval":
        for row in pipeline.evaluate(args.checkpoint, args.reward, args.n_eval):
            print(f"{row.checkpoint}\t{row.reward}\tmean={row.mean:.6f}\tstd={row.std:.6f}\tn={row.n}")
    elif args.command == "gradcheck":
        rows = pipeline.gradcheck()
        for row in rows:
            print(f"{row.check}\t{row.max_rel_error:.3e}\t{'ok' if row.passed else 'FAILED'}")
        if not all(row.passed for row in rows):
            return EXIT_CHECK_FAILED
    elif args.command == "compare":
        for row in pipeline.compare(args.budget_seconds, args.ablations):
            print(f"{row.variant}\t{row.reward}\tmean={row.mean:.6f}\tstd={row.std:.6f}\tsteps={row.steps}")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
    try:
        return run(args)
    except ValueError as e:
        logger.error("%s", e)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

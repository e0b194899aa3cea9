"""
Command-line entry point for constrained attention anomaly localization.

    python src/main.py synth  --config experiment.json --out runs/demo
    python src/main.py train  --config experiment.json --out runs/demo
    python src/main.py eval   --config experiment.json --out runs/demo --regime op
    python src/main.py ablate --config experiment.json --out runs/demo --axis p
    python src/main.py report --out runs/demo
"""
import argparse
import logging
import os
import sys
import time
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

from localization.constraints import CONSTRAINT_KINDS
from localization.errors import ConfigurationError, DataError, DomainError, NumericError, ShapeError
from localization.metrics import METHODS
from pipeline.ablation import AXIS_FIELDS, parse_values, run_ablation
from pipeline.config import apply_cli_overrides, load_experiment, resolve_output_dir
from pipeline.orchestrator import ExperimentOrchestrator

# Create logger for this module
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
HANDLED_ERRORS = (ConfigurationError, DataError, DomainError, ShapeError, NumericError, ValueError, OSError)


def configure_logging() -> None:
    level = getattr(logging, os.getenv("ANOMALY_LOG_LEVEL", "INFO").upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[
            logging.StreamHandler(),
        ]
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anomaly-localization",
        description="Unsupervised anomaly localization with size-constrained VAE attention.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment JSON file (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="overrides train.seed and data.seed")
    common.add_argument("--out", help="output directory (relative paths live under ANOMALY_OUTPUT_ROOT)")
    common.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    common.add_argument("--device", help="torch device (defaults to ANOMALY_DEVICE or cpu)")

    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("synth", parents=[common], help="generate and export the synthetic benchmark")

    train = commands.add_parser("train", parents=[common], help="train seeded repetitions")
    train.add_argument("--constraint", choices=list(CONSTRAINT_KINDS) + ["none"],
                       help="regularizer kind; none trains the vanilla VAE")
    train.add_argument("--resume", type=Path, metavar="CHECKPOINT", help="continue a run from its checkpoint")
    train.add_argument("--total-steps", type=int)
    train.add_argument("--warmup-steps", type=int)
    train.add_argument("--repetitions", type=int)
    train.add_argument("--dataset", metavar="MANIFEST", help="train on a prepared manifest instead of synthetic data")

    evaluate = commands.add_parser("eval", parents=[common], help="score checkpoints under threshold regimes")
    evaluate.add_argument("--checkpoint", type=Path, action="append", help="repeatable; defaults to every run")
    evaluate.add_argument("--dataset", metavar="MANIFEST", help="evaluate on a prepared manifest")
    evaluate.add_argument("--regime", action="append", help="fixed:<tau>, op or percentile:<q>; repeatable")
    evaluate.add_argument("--method", choices=METHODS)
    evaluate.add_argument("--split", default="test", choices=["val", "test"])

    ablate = commands.add_parser("ablate", parents=[common], help="sweep one hyperparameter axis")
    ablate.add_argument("--axis", required=True, choices=sorted(AXIS_FIELDS))
    ablate.add_argument("--values", help="comma-separated grid (defaults to the standard grid)")
    ablate.add_argument("--workers", type=int, default=1)

    report = commands.add_parser("report", parents=[common], help="average repetitions into the results table")
    report.add_argument("--reports-dir", type=Path, help="directory holding run_*/eval (defaults to --out)")
    return parser


def run(args: argparse.Namespace) -> List[Path]:
    """Execute one command and return the artifacts it wrote."""
    cfg = load_experiment(args.config)
    cfg = apply_cli_overrides(
        cfg,
        seed=args.seed,
        out=args.out,
        constraint=getattr(args, "constraint", None),
        total_steps=getattr(args, "total_steps", None),
        warmup_steps=getattr(args, "warmup_steps", None),
        repetitions=getattr(args, "repetitions", None),
        method=getattr(args, "method", None),
        regimes=getattr(args, "regime", None),
        manifest=getattr(args, "dataset", None),
    )
    output_dir = resolve_output_dir(cfg.output_dir)
    device = args.device or os.getenv("ANOMALY_DEVICE", "cpu")
    logger.info(f"📁 Output directory: {output_dir}")

    if args.command == "ablate":
        values = parse_values(args.axis, args.values)
        return [run_ablation(cfg, args.axis, output_dir, values, workers=args.workers, force=args.force, device=device)]

    orchestrator = ExperimentOrchestrator(cfg, output_dir, force=args.force, device=device)
    if args.command == "synth":
        return [orchestrator.synthesize()]
    if args.command == "train":
        if args.resume is not None:
            return [orchestrator.resume(args.resume)]
        return orchestrator.train()
    if args.command == "eval":
        return orchestrator.evaluate(args.checkpoint, split=args.split)
    return [orchestrator.report(args.reports_dir)]


def main(argv: Optional[List[str]] = None) -> int:
    """CLI entry point. Returns 0 when every artifact was written, 1 on failure; usage errors exit with 2."""
    load_dotenv()
    configure_logging()
    args = build_parser().parse_args(argv)

    logger.info(f"🚀 Running {args.command}")
    start_time = time.time()
    try:
        outputs = run(args)
    except HANDLED_ERRORS as e:
        logger.error(f"❌ {args.command} failed after {time.time() - start_time:.2f}s: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE

    for path in outputs:
        print(path)
    logger.info(f"✅ {args.command} finished in {time.time() - start_time:.2f}s")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

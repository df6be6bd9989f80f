import argparse
import logging
import sys
from pathlib import Path

from src.config import (
    CHECKPOINT_SUFFIX,
    DEFAULT_CONFIG_NAME,
    EXIT_CONFIG_ERROR,
    EXIT_DATA_ERROR,
    EXIT_DIVERGED,
    EXIT_OK,
    EXIT_RUNTIME_ERROR,
)
from src.gtrans.pipeline import GTransPipeline
from src.models import (
    CheckpointVersionError,
    ConfigError,
    CorruptSampleError,
    DatasetLayoutError,
    InvalidDataError,
    RunConfig,
    TrainingDivergedError,
)
from src.processors.synthetic import write_synthetic_dataset
from src.run_config import apply_overrides, load_run_config
from src.utils import setup_logging

logger = logging.getLogger(__name__)


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    """Parse command line arguments."""
    parser = argparse.ArgumentParser(
        description="GTrans - guided-transformer anomaly detection and localization"
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(sub: argparse.ArgumentParser) -> None:
        sub.add_argument(
            "--config",
            type=str,
            default=DEFAULT_CONFIG_NAME,
            help="JSON config file, or 'default' for built-in settings",
        )
        sub.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="Dotted config override, e.g. training.epochs=3 (repeatable)",
        )

    def add_dataset_flag(sub: argparse.ArgumentParser) -> None:
        sub.add_argument(
            "--dataset",
            type=str,
            help="'synthetic' or an MVTec category under the data root",
        )

    def add_out_flag(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--out", type=str, help="Output directory for this run")

    train_parser = subparsers.add_parser("train", help="Train a model for one category")
    add_config_flags(train_parser)
    add_dataset_flag(train_parser)
    add_out_flag(train_parser)
    train_parser.add_argument(
        "--epochs", type=int, help="Shortcut for --set training.epochs=N"
    )

    evaluate_parser = subparsers.add_parser(
        "evaluate", help="Evaluate a checkpoint on a test split"
    )
    evaluate_parser.add_argument("--checkpoint", type=str, required=True)
    evaluate_parser.add_argument("--set", dest="overrides", action="append", default=[])
    add_dataset_flag(evaluate_parser)
    add_out_flag(evaluate_parser)
    evaluate_parser.add_argument(
        "--emit-maps",
        action="store_true",
        help="Write raw maps, heatmaps and overlays per test image",
    )

    calibrate_parser = subparsers.add_parser(
        "calibrate-lambda", help="Recalibrate the lambdas of a checkpoint"
    )
    calibrate_parser.add_argument("--checkpoint", type=str, required=True)
    add_dataset_flag(calibrate_parser)

    ablate_parser = subparsers.add_parser("ablate", help="Sweep one design axis")
    add_config_flags(ablate_parser)
    add_dataset_flag(ablate_parser)
    add_out_flag(ablate_parser)
    ablate_parser.add_argument(
        "--axis",
        type=str,
        required=True,
        help="layers, tfm_depth, decoder, weights, modes or tfm",
    )
    ablate_parser.add_argument(
        "--checkpoint", type=str, help="Reuse a trained model for modes/weights"
    )

    synthetic_parser = subparsers.add_parser(
        "make-synthetic", help="Write the synthetic dataset in MVTec layout"
    )
    add_config_flags(synthetic_parser)
    synthetic_parser.add_argument("--out", type=str, required=True)

    return parser.parse_args(argv)


def _out_dir(args: argparse.Namespace, config: RunConfig, category: str) -> Path:
    return Path(args.out) if args.out else Path(config.paths.output_dir) / category


def run(args: argparse.Namespace) -> None:
    if args.command == "make-synthetic":
        config = load_run_config(args.config, args.overrides)
        category_dir = write_synthetic_dataset(config.synthetic, args.out)
        print(f"Synthetic dataset written to {category_dir}")
        return

    if args.command in ("evaluate", "calibrate-lambda"):
        checkpoint_path = Path(args.checkpoint)
        bootstrap = GTransPipeline(RunConfig())
        checkpoint = bootstrap.load(checkpoint_path)
        config = apply_overrides(checkpoint.config, getattr(args, "overrides", []))
        pipeline = GTransPipeline(config, bootstrap.weight_cache)
        data = pipeline.load_data(args.dataset or config.category)

        if args.command == "calibrate-lambda":
            lambdas = pipeline.calibrate(checkpoint_path, data)
            print(f"Calibrated lambdas: {lambdas}")
            return

        lambdas = checkpoint.lambdas
        if lambdas is not None and config.score.lambda_source == "fixed":
            lambdas = None
        report = pipeline.evaluate(
            checkpoint.network.to(pipeline.device),
            data,
            lambdas,
            out_dir=_out_dir(args, config, data.category),
            emit_maps=args.emit_maps,
        )
        print(report.to_frame().to_string(index=False))
        return

    overrides = list(args.overrides)
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"training.epochs={args.epochs}")
    config = load_run_config(args.config, overrides)
    pipeline = GTransPipeline(config)
    data = pipeline.load_data(args.dataset)
    out_dir = _out_dir(args, config, data.category)

    if args.command == "train":
        result = pipeline.fit(data, out_dir)
        print(
            f"Trained {len(result.train_log.entries)} epochs; checkpoint "
            f"{out_dir / f'{data.category}{CHECKPOINT_SUFFIX}'}"
        )
        return

    checkpoint = pipeline.load(args.checkpoint) if args.checkpoint else None
    table = pipeline.ablate(args.axis, data, out_dir, checkpoint)
    print(table.to_string(index=False))


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, ConfigError | CheckpointVersionError):
        return EXIT_CONFIG_ERROR
    if isinstance(error, DatasetLayoutError | CorruptSampleError | InvalidDataError):
        return EXIT_DATA_ERROR
    if isinstance(error, TrainingDivergedError):
        return EXIT_DIVERGED
    return EXIT_RUNTIME_ERROR


def main(argv: list[str] | None = None) -> int:
    setup_logging()
    args = parse_args(argv)
    try:
        run(args)
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        return exit_code_for(e)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

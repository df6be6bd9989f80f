import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import pandas as pd

from src.cache import WeightCache
from src.config import (
    ABLATION_SUFFIX,
    BACKBONE_STAGES,
    CHECKPOINT_SUFFIX,
    CONFIG_SNAPSHOT_SUFFIX,
    LAMBDA_SUFFIX,
    MAPS_DIR,
    REPORT_SUFFIX,
    TRAIN_LOG_SUFFIX,
)
from src.gtrans.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from src.gtrans.decorators import handle_errors
from src.gtrans.export import export_maps
from src.gtrans.metrics import evaluate
from src.gtrans.network import GTransNetwork, build_network
from src.gtrans.scoring import calibrate_lambda
from src.gtrans.trainer import train
from src.models import (
    MODE_LAYER_POSITIONS,
    CategoryReport,
    ConfigError,
    DatasetSplit,
    ErrorContext,
    EvaluationReport,
    RunConfig,
    TrainLog,
)
from src.processors.mvtec import load_mvtec_category
from src.processors.synthetic import generate_synthetic_dataset
from src.run_config import set_dotted, validate_config_tree, write_config_snapshot
from src.utils import resolve_device

logger = logging.getLogger(__name__)

SYNTHETIC_DATASET = "synthetic"
ABLATION_AXES = ("layers", "tfm_depth", "decoder", "weights", "modes", "tfm")

# Layer subsets compared by the layer study
LAYER_SUBSETS: tuple[tuple[int, ...], ...] = ((1, 2, 3, 4), (1, 2, 3), (2, 3, 4), (2, 3))
TFM_DEPTHS = (1, 2, 3)
WEIGHTING_LABELS = {
    "constant": "0.5",
    "mse": "alpha_mse",
    "cos": "alpha_cos",
    "harmonic": "alpha",
}


@dataclass
class FitResult:
    network: GTransNetwork
    train_log: TrainLog
    lambdas: list[float]
    checkpoint_path: Path | None


class GTransPipeline:
    """
    Train, calibrate, evaluate and ablate GTrans models for one category.

    Core Methods:
    - load_data(): Synthetic or MVTec-layout split for the configured category
    - fit(): Train, calibrate lambdas and write the run artifacts
    - calibrate(): Recalibrate lambdas of a saved checkpoint
    - evaluate(): Score a test set and write the JSON/CSV report (and maps)
    - ablate(): Sweep one design axis and write a comparison table
    """

    def __init__(
        self,
        config: RunConfig,
        weight_cache: WeightCache | None = None,
    ):
        self.config = config
        self.device = resolve_device(config.device)
        self.weight_cache = weight_cache or WeightCache(config.paths.weight_cache)
        self.logger = logging.getLogger(f"{__name__}.{self.__class__.__name__}")
        self.logger.info(
            f"GTransPipeline initialized for '{config.category}' on {self.device}"
        )

    # PUBLIC METHODS
    @handle_errors
    def load_data(self, dataset: str | None = None) -> DatasetSplit:
        """
        Load the split to work on.

        Args:
            dataset: "synthetic" for the in-memory synthetic split, otherwise an
                MVTec category name under paths.data_root (default: config.category).
        """
        name = dataset or self.config.category
        with ErrorContext(f"load dataset '{name}'", self.logger):
            if name == SYNTHETIC_DATASET:
                return generate_synthetic_dataset(
                    self.config.synthetic, self.config.preprocess
                )
            return load_mvtec_category(
                self.config.paths.data_root,
                name,
                self.config.preprocess,
                split_ratio=self.config.data.split_ratio,
                seed=self.config.data.split_seed,
            )

    def build(self, config: RunConfig | None = None) -> GTransNetwork:
        network = build_network(config or self.config, self.weight_cache)
        return network.to(self.device)

    @handle_errors
    def fit(self, data: DatasetSplit, out_dir: str | Path | None = None) -> FitResult:
        """
        Train a network, calibrate its lambdas and persist the run.

        With `out_dir`, or else `training.checkpoint_dir`, writes <category>_gtrans.pt
        (best checkpoint), <category>_train_log.csv, <category>_config.json and
        <category>_lambdas.json.
        """
        config = self._with_category(data.category)
        out_dir = out_dir if out_dir is not None else config.training.checkpoint_dir
        directory = Path(out_dir) if out_dir is not None else None
        checkpoint_path = (
            directory / f"{data.category}{CHECKPOINT_SUFFIX}" if directory else None
        )
        if directory is not None:
            directory.mkdir(parents=True, exist_ok=True)
            write_config_snapshot(
                config, directory / f"{data.category}{CONFIG_SNAPSHOT_SUFFIX}"
            )

        with ErrorContext(f"train '{data.category}'", self.logger):
            network = self.build(config)
            best = {"epoch": 0, "step": 0}

            def on_best(epoch: int, step: int, log: TrainLog) -> None:
                best.update(epoch=epoch, step=step)
                if checkpoint_path is not None:
                    save_checkpoint(
                        checkpoint_path, network, config, None, epoch, step, log
                    )

            network, train_log = train(
                network, data, config.training, self.device, on_best
            )
            lambdas = self._lambdas_for(network, data, config)

        if directory is not None and checkpoint_path is not None:
            save_checkpoint(
                checkpoint_path,
                network,
                config,
                lambdas,
                best["epoch"],
                best["step"],
                train_log,
            )
            train_log.to_csv(str(directory / f"{data.category}{TRAIN_LOG_SUFFIX}"))
            self._write_lambdas(lambdas, directory / f"{data.category}{LAMBDA_SUFFIX}")
        return FitResult(network, train_log, lambdas, checkpoint_path)

    @handle_errors
    def calibrate(
        self, checkpoint_path: str | Path, data: DatasetSplit
    ) -> list[float]:
        """Calibrate lambdas on the validation split and store them in the checkpoint."""
        checkpoint = self.load(checkpoint_path)
        with ErrorContext(f"calibrate '{data.category}'", self.logger):
            lambdas = calibrate_lambda(
                checkpoint.network,
                list(data.val),
                checkpoint.config.score.batch_size,
                self.device,
            )
        save_checkpoint(
            checkpoint_path,
            checkpoint.network,
            checkpoint.config,
            lambdas,
            checkpoint.epoch,
            checkpoint.step,
            checkpoint.train_log,
        )
        self._write_lambdas(
            lambdas,
            Path(checkpoint_path).parent / f"{checkpoint.config.category}{LAMBDA_SUFFIX}",
        )
        return lambdas

    def load(self, checkpoint_path: str | Path) -> Checkpoint:
        return load_checkpoint(checkpoint_path, self.device, self.weight_cache)

    @handle_errors
    def evaluate(
        self,
        network: GTransNetwork,
        data: DatasetSplit,
        lambdas: list[float] | None = None,
        out_dir: str | Path | None = None,
        emit_maps: bool = False,
        config: RunConfig | None = None,
    ) -> EvaluationReport:
        """
        Evaluate a network on the test split.

        Args:
            network: Trained network.
            data: Split whose test part is scored.
            lambdas: Per-layer lambdas; calibrated on the val split when missing.
            out_dir: Writes <category>_report.json/.csv here when given.
            emit_maps: Also write raw maps, heatmaps and overlays under maps/.
            config: Scoring settings; defaults to the pipeline config.
        """
        config = config or self.config
        with ErrorContext(f"evaluate '{data.category}'", self.logger):
            if lambdas is None:
                lambdas = self._lambdas_for(network, data, config)
            category_report, maps = evaluate(
                network,
                list(data.test),
                config,
                lambdas,
                self.device,
                keep_layer_maps=emit_maps,
            )
            report = EvaluationReport(
                fpr_cap=config.metrics.fpr_cap, categories=[category_report]
            )

        if out_dir is not None:
            directory = Path(out_dir)
            directory.mkdir(parents=True, exist_ok=True)
            self._write_report(report, directory / f"{data.category}{REPORT_SUFFIX}")
            if emit_maps:
                export_maps(
                    maps, list(data.test), config.preprocess, directory / MAPS_DIR
                )
        return report

    @handle_errors
    def ablate(
        self,
        axis: str,
        data: DatasetSplit,
        out_dir: str | Path | None = None,
        checkpoint: Checkpoint | None = None,
    ) -> pd.DataFrame:
        """
        Sweep one design axis and tabulate the three metrics per variant.

        Scoring axes (modes, weights) reuse one network, taken from `checkpoint`
        or trained once. Architecture axes (layers, tfm_depth, decoder, tfm)
        train one network per variant.

        Raises:
            ConfigError: If the axis is unknown.
        """
        if axis not in ABLATION_AXES:
            raise ConfigError(
                f"Unknown ablation axis '{axis}'. Choose from {', '.join(ABLATION_AXES)}"
            )
        base = checkpoint.config if checkpoint is not None else self._with_category(
            data.category
        )
        rows: list[dict[str, Any]] = []
        with ErrorContext(f"ablate '{axis}' on '{data.category}'", self.logger):
            if axis in ("modes", "weights"):
                rows = self._ablate_scoring(axis, data, base, checkpoint)
            else:
                for variant, overrides in self._architecture_variants(axis, base):
                    config = self._variant(base, overrides)
                    fitted = self.fit_in_memory(data, config)
                    report = self.evaluate(
                        fitted.network, data, fitted.lambdas, config=config
                    )
                    rows.append(self._row(axis, variant, report.categories[0]))

        table = pd.DataFrame(
            rows, columns=["axis", "variant", "image_auroc", "pixel_auroc", "aupro"]
        )
        if out_dir is not None:
            directory = Path(out_dir)
            directory.mkdir(parents=True, exist_ok=True)
            path = directory / f"{data.category}{ABLATION_SUFFIX}_{axis}.csv"
            table.to_csv(path, index=False)
            self.logger.info(f"Wrote ablation table {path}")
        return table

    def fit_in_memory(self, data: DatasetSplit, config: RunConfig) -> FitResult:
        """Train and calibrate a variant without writing any files."""
        network = self.build(config)
        network, train_log = train(network, data, config.training, self.device)
        return FitResult(network, train_log, self._lambdas_for(network, data, config), None)

    # PRIVATE METHODS
    def _ablate_scoring(
        self,
        axis: str,
        data: DatasetSplit,
        base: RunConfig,
        checkpoint: Checkpoint | None,
    ) -> list[dict[str, Any]]:
        if checkpoint is not None:
            network = checkpoint.network
            lambdas = checkpoint.lambdas or self._lambdas_for(network, data, base)
        else:
            fitted = self.fit_in_memory(data, base)
            network, lambdas = fitted.network, fitted.lambdas

        rows = []
        n_layers = len(base.backbone.critical_layers)
        if axis == "modes":
            variants = [
                (mode, {"score.mode": mode}) for mode in MODE_LAYER_POSITIONS
            ]
        else:
            variants = [
                (label, {"score.weighting": weighting})
                for weighting, label in WEIGHTING_LABELS.items()
            ]
        for variant, overrides in variants:
            positions = MODE_LAYER_POSITIONS.get(str(overrides.get("score.mode")), ())
            if positions and max(positions) > n_layers:
                self.logger.warning(
                    f"Skipping mode {variant}: needs {max(positions)} layers, "
                    f"have {n_layers}"
                )
                continue
            config = self._variant(base, overrides)
            report = self.evaluate(network, data, lambdas, config=config)
            rows.append(self._row(axis, variant, report.categories[0]))
        return rows

    def _architecture_variants(
        self, axis: str, base: RunConfig
    ) -> list[tuple[str, dict[str, Any]]]:
        if axis == "layers":
            available = BACKBONE_STAGES[base.backbone.family]
            variants = []
            for subset in LAYER_SUBSETS:
                if not set(subset) <= set(available):
                    self.logger.warning(
                        f"Skipping layers {subset}: {base.backbone.family} has "
                        f"stages {list(available)}"
                    )
                    continue
                variants.append(
                    (
                        "+".join(str(layer) for layer in subset),
                        {
                            "backbone.critical_layers": list(subset),
                            "score.mode": "P4",
                        },
                    )
                )
            return variants
        if axis == "tfm_depth":
            return [(f"S={depth}", {"tfm.blocks": depth}) for depth in TFM_DEPTHS]
        if axis == "decoder":
            return [
                (
                    "pure_encoder",
                    {"tfm.use_decoder": False, "mapper.token_source": "encoder"},
                ),
                (
                    "added_decoder",
                    {"tfm.use_decoder": True, "mapper.token_source": "decoder"},
                ),
            ]
        return [
            (
                "without_tfm",
                {"tfm.enabled": False, "mapper.token_source": "encoder"},
            ),
            ("with_tfm", {"tfm.enabled": True}),
        ]

    @staticmethod
    def _variant(base: RunConfig, overrides: dict[str, Any]) -> RunConfig:
        tree = base.model_dump(mode="json")
        for key, value in overrides.items():
            set_dotted(tree, key, value)
        return validate_config_tree(tree)

    @staticmethod
    def _row(axis: str, variant: str, report: CategoryReport) -> dict[str, Any]:
        return {
            "axis": axis,
            "variant": variant,
            "image_auroc": report.image_auroc,
            "pixel_auroc": report.pixel_auroc,
            "aupro": report.aupro,
        }

    def _with_category(self, category: str) -> RunConfig:
        if category == self.config.category:
            return self.config
        return self._variant(self.config, {"category": category})

    def _lambdas_for(
        self, network: GTransNetwork, data: DatasetSplit, config: RunConfig
    ) -> list[float]:
        n_layers = len(config.backbone.critical_layers)
        if config.score.lambda_source == "fixed":
            return [config.score.fixed_lambda] * n_layers
        return calibrate_lambda(
            network, list(data.val), config.score.batch_size, self.device
        )

    def _write_lambdas(self, lambdas: list[float], filepath: Path) -> None:
        with open(filepath, "w", encoding="utf-8") as f:
            json.dump({"lambdas": lambdas}, f, indent=2)
        self.logger.info(f"Wrote lambdas to {filepath}")

    def _write_report(self, report: EvaluationReport, stem: Path) -> None:
        json_path = stem.with_suffix(".json")
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(report.to_json_dict(), f, indent=2, sort_keys=True)
        report.to_frame().to_csv(stem.with_suffix(".csv"), index=False)
        self.logger.info(f"Wrote report to {json_path}")
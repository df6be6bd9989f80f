import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch

from src.cache import WeightCache
from src.config import CHECKPOINT_FORMAT_VERSION
from src.gtrans.network import GTransNetwork, build_network
from src.models import CheckpointVersionError, RunConfig, TrainLog
from src.run_config import validate_config_tree

logger = logging.getLogger(__name__)


@dataclass
class Checkpoint:
    """Everything needed to rebuild a trained network and score with it."""

    network: GTransNetwork
    config: RunConfig
    lambdas: list[float] | None = None
    epoch: int = 0
    step: int = 0
    train_log: TrainLog = field(default_factory=TrainLog)


def save_checkpoint(
    filepath: str | Path,
    network: GTransNetwork,
    config: RunConfig,
    lambdas: list[float] | None = None,
    epoch: int = 0,
    step: int = 0,
    train_log: TrainLog | None = None,
) -> Path:
    """
    Write a versioned checkpoint container.

    The container holds the format version, the resolved run config, the full
    network state, per-layer lambdas, the epoch/step counters and the train log.
    """
    path = Path(filepath)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload: dict[str, Any] = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "run_config": config.model_dump(mode="json"),
        "state_dict": network.state_dict(),
        "lambdas": lambdas,
        "epoch": epoch,
        "step": step,
        "category": config.category,
        "train_log": (train_log or TrainLog()).model_dump(mode="json"),
    }
    torch.save(payload, path)
    logger.info(f"Saved checkpoint {path} (epoch {epoch}, step {step})")
    return path


def load_checkpoint(
    filepath: str | Path,
    device: torch.device | str = "cpu",
    weight_cache: WeightCache | None = None,
) -> Checkpoint:
    """
    Rebuild the network stored in a checkpoint.

    Raises:
        FileNotFoundError: If the file does not exist.
        CheckpointVersionError: If the container is not a supported version.
    """
    path = Path(filepath)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint not found: {path}")

    payload = torch.load(path, map_location=device, weights_only=True)
    version = payload.get("format_version") if isinstance(payload, dict) else None
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointVersionError(
            f"Checkpoint {path} has format version {version}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )

    config = validate_config_tree(payload["run_config"])
    network = build_network(config, weight_cache, load_pretrained=False)
    network.load_state_dict(payload["state_dict"])
    network.to(device)
    logger.info(f"Loaded checkpoint {path} ({config.category}, epoch {payload['epoch']})")
    return Checkpoint(
        network=network,
        config=config,
        lambdas=payload["lambdas"],
        epoch=payload["epoch"],
        step=payload["step"],
        train_log=TrainLog.model_validate(payload["train_log"]),
    )

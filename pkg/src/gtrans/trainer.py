import copy
import logging
import math
import time
from collections.abc import Callable, Sequence

import torch
from torch.utils.data import DataLoader, TensorDataset
from tqdm import tqdm

from src.gtrans.losses import total_loss
from src.gtrans.network import GTransNetwork, iter_outputs
from src.models import (
    ConfigError,
    DatasetSplit,
    GTransError,
    ImageSample,
    InvalidDataError,
    InvalidInputError,
    TrainConfig,
    TrainingDivergedError,
    TrainLog,
    TrainLogEntry,
)
from src.processors.image_processor import ImageProcessor
from src.utils import parameter_checksum, seed_everything

logger = logging.getLogger(__name__)

# Called with (epoch, step, log) whenever a new best checkpoint is selected
BestCallback = Callable[[int, int, TrainLog], None]


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Exponentially decayed learning rate lr_init * rate^(step / total_steps)."""
    if total_steps <= 0:
        raise ConfigError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise InvalidInputError(f"step {step} outside [0, {total_steps}]")
    return config.lr_init * config.decay_rate ** (step / total_steps)


def mean_loss(
    network: GTransNetwork,
    samples: Sequence[ImageSample],
    batch_size: int,
    device: torch.device | None = None,
) -> float:
    """Per-image distillation loss averaged over a sample set, without gradients."""
    if not samples:
        raise InvalidDataError("Cannot compute a loss over an empty sample set")
    total = 0.0
    for _, output in iter_outputs(network, samples, batch_size, device):
        total += float(total_loss(output.guide, output.mapped, reduction="none").sum())
    return total / len(samples)


def train(
    network: GTransNetwork,
    data: DatasetSplit,
    config: TrainConfig,
    device: torch.device | None = None,
    on_best: BestCallback | None = None,
) -> tuple[GTransNetwork, TrainLog]:
    """
    Fit the student path of `network` to the frozen guide on normal images.

    Adam with coupled weight decay runs over mini-batches; the learning rate is
    set from lr_at before every optimizer step. After each epoch the validation
    loss (the training loss when there is no validation split) selects the best
    weights, which are restored before returning.

    Args:
        network: Assembled network with a frozen guide.
        data: Split whose train and val parts are normal images.
        config: Schedule and loop settings.
        device: Device to train on; defaults to the network's device.
        on_best: Invoked after each improvement, e.g. to persist a checkpoint.

    Returns:
        The network carrying the best weights, and the per-epoch log.

    Raises:
        InvalidDataError: If the train split is empty.
        TrainingDivergedError: If a mini-batch loss is not finite.
    """
    if not data.train:
        raise InvalidDataError(f"Train split of '{data.category}' is empty")

    device = device or next(network.parameters()).device
    generator = seed_everything(config.seed)
    images = ImageProcessor.to_batch(data.train)
    loader = DataLoader(
        TensorDataset(images),
        batch_size=config.batch_size,
        shuffle=True,
        generator=generator,
    )
    total_steps = config.epochs * len(loader)
    optimizer = torch.optim.Adam(
        network.trainable_parameters(),
        lr=lr_at(0, total_steps, config),
        betas=(0.9, 0.999),
        eps=1e-8,
        weight_decay=config.weight_decay,
    )

    guide_checksum = parameter_checksum(network.guide)
    log = TrainLog()
    best_metric = math.inf
    best_state: dict[str, torch.Tensor] | None = None
    step = 0
    logger.info(
        f"Training '{data.category}' on {len(data.train)} images "
        f"({config.epochs} epochs, {total_steps} steps)"
    )

    epochs = tqdm(
        range(1, config.epochs + 1),
        desc=f"Training {data.category}",
        disable=not config.show_progress,
    )
    for epoch in epochs:
        started = time.perf_counter()
        network.train()
        epoch_total = 0.0
        lr = lr_at(step, total_steps, config)
        for (batch,) in loader:
            lr = lr_at(step, total_steps, config)
            for group in optimizer.param_groups:
                group["lr"] = lr

            output = network(batch.to(device))
            loss = total_loss(output.guide, output.mapped)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(step, float(loss))

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            epoch_total += float(loss.detach()) * batch.shape[0]
            logger.debug(f"step {step}/{total_steps} loss {float(loss):.6f} lr {lr:.3e}")

        train_loss = epoch_total / len(data.train)
        val_loss = (
            mean_loss(network, data.val, config.batch_size, device) if data.val else None
        )
        log.append(
            TrainLogEntry(
                epoch=epoch,
                train_loss=train_loss,
                val_loss=val_loss,
                lr=lr,
                wall_time=time.perf_counter() - started,
            )
        )
        epochs.set_postfix(loss=f"{train_loss:.4f}", lr=f"{lr:.2e}")
        val_text = f"{val_loss:.6f}" if val_loss is not None else "n/a"
        logger.info(
            f"Epoch {epoch}/{config.epochs}: train loss {train_loss:.6f}, "
            f"val loss {val_text}, lr {lr:.3e}"
        )

        metric = val_loss if val_loss is not None else train_loss
        if metric < best_metric:
            best_metric = metric
            best_state = copy.deepcopy(network.state_dict())
            if on_best is not None:
                on_best(epoch, step, log)

    if best_state is not None:
        network.load_state_dict(best_state)
    if parameter_checksum(network.guide) != guide_checksum:
        raise GTransError("Guide parameters changed during training")
    logger.info(f"Training finished; best selection loss {best_metric:.6f}")
    return network, log

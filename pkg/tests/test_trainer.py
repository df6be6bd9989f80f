import pytest
import torch
from torch import nn

from src.gtrans import trainer
from src.gtrans.losses import total_loss
from src.gtrans.network import build_network
from src.gtrans.trainer import lr_at, mean_loss, train
from src.models import (
    ConfigError,
    DatasetSplit,
    InvalidDataError,
    InvalidInputError,
    TrainConfig,
    TrainingDivergedError,
)
from src.processors.image_processor import ImageProcessor
from src.utils import parameter_checksum
from tests.conftest import make_tiny_config


def test_lr_at_schedule_endpoints():
    config = TrainConfig(lr_init=1e-3, decay_rate=0.9)
    assert lr_at(0, 1000, config) == pytest.approx(1e-3)
    assert lr_at(500, 1000, config) == pytest.approx(1e-3 * 0.9**0.5)
    assert lr_at(1000, 1000, config) == pytest.approx(9e-4)


def test_lr_at_is_non_increasing():
    config = TrainConfig()
    rates = [lr_at(step, 50, config) for step in range(51)]
    assert all(a >= b for a, b in zip(rates, rates[1:], strict=False))


def test_lr_at_rejects_bad_arguments():
    config = TrainConfig()
    with pytest.raises(ConfigError):
        lr_at(0, 0, config)
    with pytest.raises(InvalidInputError):
        lr_at(11, 10, config)
    with pytest.raises(InvalidInputError):
        lr_at(-1, 10, config)


def test_train_keeps_guide_frozen(tiny_network, tiny_config, synthetic_split):
    before = parameter_checksum(tiny_network.guide)
    student_before = parameter_checksum(tiny_network.student)
    network, log = train(tiny_network, synthetic_split, tiny_config.training)

    assert parameter_checksum(network.guide) == before
    assert parameter_checksum(network.student) != student_before
    assert not network.guide.training
    assert len(log.entries) == tiny_config.training.epochs
    assert [entry.epoch for entry in log.entries] == [1, 2]


def test_train_logs_decaying_learning_rate(tiny_network, tiny_config, synthetic_split):
    _, log = train(tiny_network, synthetic_split, tiny_config.training)
    rates = [entry.lr for entry in log.entries]
    assert rates[0] <= tiny_config.training.lr_init
    assert rates[1] < rates[0]
    assert all(entry.val_loss is not None for entry in log.entries)


def test_train_is_deterministic(tiny_config, synthetic_split):
    first, first_log = train(build_network(tiny_config), synthetic_split, tiny_config.training)
    second, second_log = train(build_network(tiny_config), synthetic_split, tiny_config.training)

    assert first_log.train_losses == second_log.train_losses
    for name, tensor in first.state_dict().items():
        torch.testing.assert_close(tensor, second.state_dict()[name], rtol=0, atol=0)


def test_train_calls_on_best(tiny_network, tiny_config, synthetic_split):
    calls = []
    train(
        tiny_network,
        synthetic_split,
        tiny_config.training,
        on_best=lambda epoch, step, log: calls.append((epoch, step, len(log.entries))),
    )
    assert calls
    assert calls[0][0] == 1
    assert all(n_entries == epoch for epoch, _, n_entries in calls)


def test_train_restores_best_weights(tiny_network, tiny_config, synthetic_split):
    network, log = train(tiny_network, synthetic_split, tiny_config.training)
    best = min(entry.val_loss for entry in log.entries)
    restored = mean_loss(network, synthetic_split.val, batch_size=4)
    assert restored == pytest.approx(best, rel=1e-4)


def test_train_raises_on_divergence(monkeypatch, tiny_network, tiny_config, synthetic_split):
    monkeypatch.setattr(
        trainer, "total_loss", lambda *args, **kwargs: torch.tensor(float("nan"))
    )
    with pytest.raises(TrainingDivergedError) as excinfo:
        train(tiny_network, synthetic_split, tiny_config.training)
    assert excinfo.value.step == 0


def test_train_with_empty_split_raises(tiny_network, tiny_config, synthetic_split):
    empty = DatasetSplit(category="synthetic", train=(), val=(), test=synthetic_split.test)
    with pytest.raises(InvalidDataError):
        train(tiny_network, empty, tiny_config.training)


@pytest.mark.parametrize(
    "name",
    [
        "guide_tokenizer.layers.0.to_values.weight",
        "student_tokenizer.layers.1.to_groups.weight",
        "tfm.encoders.0.w_q.weight",
        "tfm.encoders.0.l_2.weight",
        "tfm.decoders.0.w_k.weight",
        "tfm.decoders.0.w_v.weight",
        "mapper.layers.0.query.weight",
        "mapper.layers.2.key.weight",
    ],
)
def test_loss_gradient_matches_finite_differences(tmp_path, synthetic_split, name):
    config = make_tiny_config(tmp_path, mapper={"token_source": "decoder"})
    network = build_network(config).double()
    network.eval()
    for layer in network.mapper.layers:
        nn.init.normal_(layer.value.weight, std=0.1)
    images = ImageProcessor.to_batch(list(synthetic_split.train[:2])).double()

    weight = network.get_parameter(name)

    def loss() -> torch.Tensor:
        output = network(images)
        return total_loss(output.guide, output.mapped)

    network.zero_grad()
    loss().backward()
    assert weight.grad is not None
    analytic = weight.grad.view(-1).clone()

    eps = 1e-6
    for index in (0, 5, weight.numel() - 1):
        with torch.no_grad():
            flat = weight.view(-1)
            original = flat[index].item()
            flat[index] = original + eps
            upper = loss().item()
            flat[index] = original - eps
            lower = loss().item()
            flat[index] = original
        numeric = (upper - lower) / (2 * eps)
        assert analytic[index].item() == pytest.approx(numeric, rel=1e-4, abs=1e-8)

import json

import pandas as pd
import pytest
import torch
from torch import nn

from src.gtrans.losses import total_loss
from src.gtrans.network import build_network
from src.gtrans.pipeline import GTransPipeline
from src.models import ConfigError, DatasetLayoutError
from src.processors.image_processor import ImageProcessor
from src.processors.synthetic import write_synthetic_dataset
from tests.conftest import make_tiny_config


@pytest.fixture
def pipeline(tiny_config) -> GTransPipeline:
    return GTransPipeline(tiny_config)


def test_load_data_synthetic(pipeline):
    data = pipeline.load_data("synthetic")
    assert data.category == "synthetic"
    assert len(data.train) + len(data.val) == 10
    assert len(data.test) == 6


def test_load_data_from_disk(tmp_path):
    config = make_tiny_config(
        tmp_path,
        category="disk",
        synthetic={"category": "disk"},
        preprocess={"resize_edge": 32, "crop_size": 32},
    )
    write_synthetic_dataset(config.synthetic, config.paths.data_root)
    data = GTransPipeline(config).load_data()
    assert data.category == "disk"
    assert len(data.test) == 6
    assert all(s.pixels.shape == (32, 32, 3) for s in data.test)


def test_load_data_missing_category_raises(pipeline):
    with pytest.raises(DatasetLayoutError):
        pipeline.load_data("bottle")


def test_fit_writes_run_artifacts(tmp_path, pipeline):
    data = pipeline.load_data("synthetic")
    out_dir = tmp_path / "run"
    result = pipeline.fit(data, out_dir)

    assert result.checkpoint_path == out_dir / "synthetic_gtrans.pt"
    assert result.checkpoint_path.is_file()
    assert len(result.lambdas) == 3
    assert all(lam > 0 for lam in result.lambdas)

    log = pd.read_csv(out_dir / "synthetic_train_log.csv")
    assert list(log.columns) == ["epoch", "train_loss", "val_loss", "lr"]
    assert len(log) == 2
    assert json.loads((out_dir / "synthetic_lambdas.json").read_text())["lambdas"] == pytest.approx(
        result.lambdas
    )
    assert (out_dir / "synthetic_config.json").is_file()

    checkpoint = pipeline.load(result.checkpoint_path)
    assert checkpoint.lambdas == pytest.approx(result.lambdas)


def test_fit_falls_back_to_checkpoint_dir(tmp_path):
    checkpoint_dir = tmp_path / "checkpoints"
    config = make_tiny_config(
        tmp_path, training={"epochs": 1, "checkpoint_dir": str(checkpoint_dir)}
    )
    pipeline = GTransPipeline(config)
    result = pipeline.fit(pipeline.load_data("synthetic"))

    assert result.checkpoint_path == checkpoint_dir / "synthetic_gtrans.pt"
    assert result.checkpoint_path.is_file()
    assert (checkpoint_dir / "synthetic_train_log.csv").is_file()


def test_fit_without_any_directory_writes_nothing(pipeline):
    result = pipeline.fit(pipeline.load_data("synthetic"))
    assert result.checkpoint_path is None


def test_calibrate_updates_checkpoint(tmp_path, pipeline):
    data = pipeline.load_data("synthetic")
    result = pipeline.fit(data, tmp_path / "run")
    lambdas = pipeline.calibrate(result.checkpoint_path, data)
    assert lambdas == pytest.approx(result.lambdas, rel=1e-5)
    assert pipeline.load(result.checkpoint_path).lambdas == pytest.approx(lambdas)


def test_evaluate_writes_report_and_maps(tmp_path, pipeline):
    data = pipeline.load_data("synthetic")
    fitted = pipeline.fit_in_memory(data, pipeline.config)
    out_dir = tmp_path / "eval"
    report = pipeline.evaluate(fitted.network, data, fitted.lambdas, out_dir, emit_maps=True)

    assert report.categories[0].n_images == 6
    payload = json.loads((out_dir / "synthetic_report.json").read_text())
    assert payload["fpr_cap"] == 0.3
    assert (out_dir / "synthetic_report.csv").is_file()
    assert len(list((out_dir / "maps").iterdir())) == 18
    assert len(list((out_dir / "maps").glob("*.npz"))) == 6


def test_evaluate_with_fixed_lambdas(tmp_path):
    config = make_tiny_config(tmp_path, score={"lambda_source": "fixed", "fixed_lambda": 2.0})
    pipeline = GTransPipeline(config)
    data = pipeline.load_data("synthetic")
    network = pipeline.build()
    report = pipeline.evaluate(network, data)
    assert 0.0 <= report.mean_aupro <= 1.0


def test_ablate_modes(tmp_path, pipeline):
    data = pipeline.load_data("synthetic")
    table = pipeline.ablate("modes", data, tmp_path / "ablate")
    assert table["variant"].tolist() == ["P1", "P2", "P3", "P4", "P5", "P6"]
    assert list(table.columns) == ["axis", "variant", "image_auroc", "pixel_auroc", "aupro"]
    assert (tmp_path / "ablate" / "synthetic_ablation_modes.csv").is_file()


def test_ablate_weights(pipeline):
    data = pipeline.load_data("synthetic")
    table = pipeline.ablate("weights", data)
    assert table["variant"].tolist() == ["0.5", "alpha_mse", "alpha_cos", "alpha"]


def test_ablate_decoder(tmp_path):
    config = make_tiny_config(tmp_path, training={"epochs": 1})
    pipeline = GTransPipeline(config)
    table = pipeline.ablate("decoder", pipeline.load_data("synthetic"))
    assert table["variant"].tolist() == ["pure_encoder", "added_decoder"]


def test_added_decoder_variant_trains_the_decoder(pipeline, synthetic_split):
    variants = dict(pipeline._architecture_variants("decoder", pipeline.config))
    encoder_only = build_network(
        pipeline._variant(pipeline.config, variants["pure_encoder"])
    )
    assert encoder_only.tfm is not None and len(encoder_only.tfm.decoders) == 0

    network = build_network(pipeline._variant(pipeline.config, variants["added_decoder"]))
    for layer in network.mapper.layers:
        nn.init.normal_(layer.value.weight, std=0.1)
    output = network(ImageProcessor.to_batch(list(synthetic_split.train[:2])))
    total_loss(output.guide, output.mapped).backward()

    grads = [p.grad for p in network.tfm.decoders.parameters()]
    assert grads and all(g is not None for g in grads)
    assert any(torch.count_nonzero(g) > 0 for g in grads)


def test_ablate_layers_skips_unavailable_stages(tmp_path):
    config = make_tiny_config(tmp_path, training={"epochs": 1})
    pipeline = GTransPipeline(config)
    table = pipeline.ablate("layers", pipeline.load_data("synthetic"))
    assert table["variant"].tolist() == ["1+2+3", "2+3"]


def test_ablate_unknown_axis_raises(pipeline):
    with pytest.raises(ConfigError):
        pipeline.ablate("dropout", pipeline.load_data("synthetic"))

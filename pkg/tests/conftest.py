from pathlib import Path
from typing import Any

import pytest
import torch

from src.gtrans.network import GTransNetwork, build_network
from src.models import DatasetSplit, FeaturePyramid, RunConfig
from src.processors.synthetic import generate_synthetic_dataset, write_synthetic_dataset
from src.run_config import validate_config_tree


def make_tiny_config(tmp_path: Path, **sections: Any) -> RunConfig:
    """Small tiny_test configuration that trains in seconds on CPU."""
    tree: dict = {
        "category": "synthetic",
        "seed": 0,
        "device": "cpu",
        "backbone": {"family": "tiny_test", "critical_layers": [1, 2, 3]},
        "tokenizer": {"groups": 4, "dim": 16},
        "tfm": {"blocks": 1},
        "training": {"epochs": 2, "batch_size": 4, "show_progress": False},
        "synthetic": {
            "image_size": 32,
            "n_normal": 10,
            "n_test_normal": 3,
            "n_test_anomalous": 3,
            "patch_size": 8,
        },
        "score": {"sigma": 1.0, "batch_size": 4},
        "paths": {
            "data_root": str(tmp_path / "data"),
            "weight_cache": str(tmp_path / "weights"),
            "output_dir": str(tmp_path / "outputs"),
        },
    }
    for name, values in sections.items():
        if isinstance(values, dict):
            tree.setdefault(name, {}).update(values)
        else:
            tree[name] = values
    return validate_config_tree(tree)


@pytest.fixture
def tiny_config(tmp_path: Path) -> RunConfig:
    return make_tiny_config(tmp_path)


@pytest.fixture
def tiny_network(tiny_config: RunConfig) -> GTransNetwork:
    return build_network(tiny_config)


@pytest.fixture
def synthetic_split(tiny_config: RunConfig) -> DatasetSplit:
    return generate_synthetic_dataset(tiny_config.synthetic, tiny_config.preprocess)


@pytest.fixture
def mvtec_root(tmp_path: Path, tiny_config: RunConfig) -> Path:
    """Synthetic dataset written to disk in MVTec layout; returns the root."""
    root = tmp_path / "mvtec"
    write_synthetic_dataset(tiny_config.synthetic, root)
    return root


def random_pyramid(
    shapes: list[tuple[int, ...]],
    source: str = "guide",
    seed: int = 0,
    dtype: torch.dtype = torch.float64,
) -> FeaturePyramid:
    generator = torch.Generator().manual_seed(seed)
    layers = [torch.randn(shape, generator=generator, dtype=dtype) for shape in shapes]
    return FeaturePyramid(layers=layers, source=source)

import logging
from typing import Self

import torch
from torch import nn
from torchvision import models

from src.cache import WeightCache
from src.config import TINY_GUIDE_SEED, TINY_STAGE_CHANNELS
from src.models import (
    BackboneConfig,
    BackboneRole,
    ConfigError,
    FeaturePyramid,
    ShapeError,
)

logger = logging.getLogger(__name__)

# Stem output stride; every stage after the first halves the resolution.
STEM_STRIDE = 4


class Backbone(nn.Module):
    """
    A residual network cut into a stem and numbered stages.

    Only the stages up to the deepest critical layer are kept.
    """

    def __init__(
        self,
        stem: nn.Module,
        stages: list[nn.Module],
        config: BackboneConfig,
    ):
        super().__init__()
        self.stem = stem
        self.stages = nn.ModuleList(stages[: max(config.critical_layers)])
        self.config = config
        self.frozen = False

    @property
    def critical_layers(self) -> list[int]:
        return list(self.config.critical_layers)

    @property
    def required_stride(self) -> int:
        return STEM_STRIDE * 2 ** (max(self.critical_layers) - 1)

    def train(self, mode: bool = True) -> Self:
        # A frozen network always runs with running statistics
        return super().train(mode and not self.frozen)

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"Expected B x 3 x H x W input, got {tuple(images.shape)}")
        height, width = images.shape[-2:]
        if height % self.required_stride or width % self.required_stride:
            raise ShapeError(
                f"Input {height}x{width} is not divisible by the backbone stride "
                f"{self.required_stride}"
            )

        x = self.stem(images)
        features = []
        for index, stage in enumerate(self.stages, start=1):
            x = stage(x)
            if index in self.critical_layers:
                features.append(x)
        return features


class TinyBackbone(nn.Module):
    """Three-stage 8/16/32-channel network with the ResNet stride pattern."""

    def __init__(self, channels: tuple[int, int, int] = TINY_STAGE_CHANNELS):
        super().__init__()
        c1, c2, c3 = channels
        self.stem = nn.Sequential(
            nn.Conv2d(3, c1, kernel_size=3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(c1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(kernel_size=3, stride=2, padding=1),
        )
        self.stages = nn.ModuleList(
            [
                _conv_bn_relu(c1, c1, stride=1),
                _conv_bn_relu(c1, c2, stride=2),
                _conv_bn_relu(c2, c3, stride=2),
            ]
        )


def _conv_bn_relu(in_channels: int, out_channels: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
    )


def build_backbone(
    config: BackboneConfig,
    role: BackboneRole,
    weight_cache: WeightCache | None = None,
    load_pretrained: bool = True,
) -> Backbone:
    """
    Build the guide or student backbone.

    Args:
        config: Backbone family and critical layers.
        role: "guide" instances carry pretrained weights, "student" instances are
            randomly initialized from the current torch RNG state.
        weight_cache: Source of pretrained weights for the ResNet families.
        load_pretrained: Skip fetching weights when a checkpoint will overwrite them.

    Returns:
        The backbone; guides are returned frozen.
    """
    instance_config = config.for_role(role)

    if config.family == "tiny_test":
        if instance_config.pretrained:
            # A fixed seed stands in for pretraining
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(TINY_GUIDE_SEED)
                tiny = TinyBackbone()
        else:
            tiny = TinyBackbone()
        backbone = Backbone(tiny.stem, list(tiny.stages), instance_config)
    else:
        resnet = getattr(models, config.family)(weights=None)
        if instance_config.pretrained and load_pretrained:
            if weight_cache is None:
                raise ConfigError(f"A weight cache is required for pretrained {config.family}")
            resnet.load_state_dict(weight_cache.get_state_dict(config.family))
            logger.info(f"Loaded pretrained {config.family} weights")
        stem = nn.Sequential(resnet.conv1, resnet.bn1, resnet.relu, resnet.maxpool)
        stages = [resnet.layer1, resnet.layer2, resnet.layer3, resnet.layer4]
        backbone = Backbone(stem, stages, instance_config)

    if role == "guide":
        freeze(backbone)
    return backbone


def freeze(network: Backbone) -> Backbone:
    """Mark every parameter non-trainable and pin the network to evaluation mode."""
    for parameter in network.parameters():
        parameter.requires_grad_(False)
    network.frozen = True
    network.eval()
    return network


def extract_pyramid(network: Backbone, batch: torch.Tensor) -> FeaturePyramid:
    """
    Per-critical-layer activations of a batch, in layer order.

    A frozen network runs without gradient bookkeeping.
    """
    source = "guide" if network.frozen else "student"
    if network.frozen:
        with torch.no_grad():
            layers = network(batch)
    else:
        layers = network(batch)
    return FeaturePyramid(layers=layers, source=source)

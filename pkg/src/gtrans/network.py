import logging
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from typing import Self

import torch
from torch import nn

from src.cache import WeightCache
from src.config import BACKBONE_CHANNELS
from src.gtrans.backbones import Backbone, build_backbone, extract_pyramid
from src.gtrans.mapper import Mapper
from src.gtrans.tfm import TFM, tfm_forward
from src.gtrans.tokenizer import Tokenizer
from src.models import (
    FeaturePyramid,
    ImageSample,
    MapperConfig,
    RunConfig,
    TfmConfig,
    TokenGroup,
)
from src.processors.image_processor import ImageProcessor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NetworkOutput:
    guide: FeaturePyramid
    student: FeaturePyramid
    mapped: FeaturePyramid
    guide_tokens: TokenGroup
    student_tokens: TokenGroup
    encoder_out: torch.Tensor
    decoder_out: torch.Tensor | None


class GTransNetwork(nn.Module):
    """
    Frozen guide backbone plus the trainable student path
    (backbone -> tokenizer -> TFM -> mapper).
    """

    def __init__(
        self,
        guide: Backbone,
        student: Backbone,
        groups: int,
        dim: int,
        tfm_config: TfmConfig,
        mapper_config: MapperConfig,
    ):
        super().__init__()
        channels = [
            BACKBONE_CHANNELS[guide.config.family][layer - 1]
            for layer in guide.critical_layers
        ]
        self.guide = guide
        self.student = student
        self.guide_tokenizer = Tokenizer(channels, groups, dim, guide.critical_layers)
        self.student_tokenizer = Tokenizer(channels, groups, dim, guide.critical_layers)
        self.tfm = TFM(dim, tfm_config) if tfm_config.enabled else None
        self.mapper = Mapper(channels, dim, groups)
        self.tfm_config = tfm_config
        self.mapper_config = mapper_config

    @property
    def critical_layers(self) -> list[int]:
        return self.guide.critical_layers

    def train(self, mode: bool = True) -> Self:
        super().train(mode)
        self.guide.eval()
        return self

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def forward(self, images: torch.Tensor) -> NetworkOutput:
        F_G = extract_pyramid(self.guide, images)
        F_T = extract_pyramid(self.student, images)
        T_G = self.guide_tokenizer(F_G)
        T_T = self.student_tokenizer(F_T)

        if self.tfm_config.encoder_input == "guide":
            encoder_tokens, decoder_tokens = T_G, T_T
        else:
            encoder_tokens, decoder_tokens = T_T, T_G

        if self.tfm is not None:
            E_out, D_out = tfm_forward(encoder_tokens, decoder_tokens, self.tfm)
        else:
            E_out, D_out = encoder_tokens.tokens, None

        tokens = D_out if self.mapper_config.token_source == "decoder" else E_out
        assert tokens is not None
        query = F_G if self.mapper_config.query_source == "guide" else F_T
        F_M = self.mapper(F_T, query, tokens)

        return NetworkOutput(
            guide=F_G,
            student=F_T,
            mapped=F_M,
            guide_tokens=T_G,
            student_tokens=T_T,
            encoder_out=E_out,
            decoder_out=D_out,
        )


def build_network(
    config: RunConfig,
    weight_cache: WeightCache | None = None,
    load_pretrained: bool = True,
) -> GTransNetwork:
    """
    Assemble a GTransNetwork from a run configuration.

    Trainable parameters are initialized from `config.seed`, so equal configs
    build identical networks.
    """
    torch.manual_seed(config.seed)
    guide = build_backbone(config.backbone, "guide", weight_cache, load_pretrained)
    student = build_backbone(config.backbone, "student")
    network = GTransNetwork(
        guide=guide,
        student=student,
        groups=config.tokenizer.groups,
        dim=config.tokenizer.dim,
        tfm_config=config.tfm,
        mapper_config=config.mapper,
    )
    n_trainable = sum(p.numel() for p in network.trainable_parameters())
    logger.info(
        f"Built GTrans network ({config.backbone.family}, layers "
        f"{config.backbone.critical_layers}, {n_trainable:,} trainable parameters)"
    )
    return network


def iter_outputs(
    network: GTransNetwork,
    samples: Sequence[ImageSample],
    batch_size: int,
    device: torch.device | None = None,
) -> Iterator[tuple[list[ImageSample], NetworkOutput]]:
    """
    Run the network in evaluation mode over `samples` in order, batch by batch.

    The caller's train/eval mode is restored afterwards.
    """
    was_training = network.training
    network.eval()
    device = device or next(network.parameters()).device
    try:
        with torch.no_grad():
            for start in range(0, len(samples), batch_size):
                chunk = list(samples[start : start + batch_size])
                images = ImageProcessor.to_batch(chunk).to(device)
                yield chunk, network(images)
    finally:
        network.train(was_training)

"""Full network: backbone -> GRM -> heads."""

from __future__ import annotations

import numpy as np

from .backbone import Backbone
from .config import ModelConfig
from .grm import GRM
from .heads import Head, HeadOutput
from .layers import Module
from .tensor import Tensor


class PoseNet(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        c = config.base_width
        self.backbone = Backbone(config, rng)
        self.grm = GRM(c, rng) if config.use_grm else None
        self.head = Head(c, config.keypoint_count, config.tag_dim, rng)

    def features(self, image: Tensor) -> Tensor:
        pyr = self.backbone(image)
        if self.grm is None:
            return pyr.p3
        return self.grm(pyr.p1, pyr.p2, pyr.p3)

    def forward(self, image: Tensor) -> HeadOutput:
        return self.head(self.features(image))


def build_model(config: ModelConfig, seed: int = 0) -> PoseNet:
    return PoseNet(config, seed)

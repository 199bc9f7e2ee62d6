"""Shrunken multi-branch high-resolution backbone.

Stage 1 is the stem (two stride-2 convs plus blocks on a single branch).
Each later stage opens one new branch at half resolution and twice the
width, runs the configured residual blocks per branch and ends with a full
exchange unit.  The top branch of the last stage is refined by MFA (or a
plain basic block when MFA is disabled).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .layers import BasicBlock, ConvBN, Module
from .mfa import MFA
from .tensor import ShapeError, Tensor


@dataclass
class FeaturePyramid:
    p1: Tensor
    p2: Tensor
    p3: Tensor

    def __iter__(self):
        return iter((self.p1, self.p2, self.p3))


class UpPath(Module):
    """1x1 conv/BN for channel matching, then nearest upsampling."""

    def __init__(self, cin, cout, factor, rng):
        self.proj = ConvBN(cin, cout, 1, rng, act=False)
        self.factor = factor

    def forward(self, x):
        return T.upsample_nearest(self.proj(x), self.factor)


class DownPath(Module):
    """Chain of stride-2 3x3 conv/BN, one per halving."""

    def __init__(self, cin, cout, steps, rng):
        self.convs = [ConvBN(cin, cin, 3, rng, stride=2, act=True) for _ in range(steps - 1)]
        self.convs.append(ConvBN(cin, cout, 3, rng, stride=2, act=False))

    def forward(self, x):
        for conv in self.convs:
            x = conv(x)
        return x


class FusionUnit(Module):
    """Every output branch sums resampled copies of every input branch."""

    def __init__(self, widths: list[int], rng: np.random.Generator):
        self.widths = list(widths)
        nb = len(widths)
        self.paths = []
        for j in range(nb):
            row = []
            for i in range(nb):
                if i == j:
                    row.append(None)
                elif i > j:
                    row.append(UpPath(widths[i], widths[j], 2 ** (i - j), rng))
                else:
                    row.append(DownPath(widths[i], widths[j], j - i, rng))
            self.paths.append(row)

    def _children(self):
        for j, row in enumerate(self.paths):
            for i, path in enumerate(row):
                if path is not None:
                    yield f"paths.{j}.{i}", path

    def forward(self, feats: list[Tensor]) -> list[Tensor]:
        if len(feats) != len(self.widths):
            raise ShapeError(f"fusion unit built for {len(self.widths)} branches, got {len(feats)}")
        ref_h, ref_w = feats[0].shape[2:]
        for b, (f, c) in enumerate(zip(feats, self.widths)):
            want = (c, ref_h >> b, ref_w >> b)
            if f.shape[1:] != want:
                raise ShapeError(f"branch {b + 1} has shape {f.shape}, expected (N, *{want})")
        if len(feats) == 1:
            return list(feats)
        out = []
        for j, row in enumerate(self.paths):
            terms = [feats[i] if path is None else path(feats[i]) for i, path in enumerate(row)]
            out.append(T.relu(T.add_n(terms)))
        return out


def fuse_branches(unit: FusionUnit, features: list[Tensor]) -> list[Tensor]:
    return unit(features)


class Stage(Module):
    def __init__(self, widths: list[int], counts: list[int], rng: np.random.Generator):
        self.blocks = [[BasicBlock(c, rng) for _ in range(n)] for c, n in zip(widths, counts)]
        self.fusion = FusionUnit(widths, rng) if len(widths) > 1 else None

    def _children(self):
        for b, blocks in enumerate(self.blocks):
            for k, blk in enumerate(blocks):
                yield f"blocks.{b}.{k}", blk
        if self.fusion is not None:
            yield "fusion", self.fusion

    def forward(self, feats: list[Tensor]) -> list[Tensor]:
        out = []
        for f, blocks in zip(feats, self.blocks):
            for blk in blocks:
                f = blk(f)
            out.append(f)
        return self.fusion(out) if self.fusion is not None else out


class Backbone(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        c = config.base_width
        self.stem1 = ConvBN(3, c, 3, rng, stride=2)
        self.stem2 = ConvBN(c, c, 3, rng, stride=2)
        self.transitions = []
        self.stages = []
        for s, counts in enumerate(config.block_counts, start=1):
            widths = [config.branch_width(b) for b in range(1, s + 1)]
            if s > 1:
                self.transitions.append(ConvBN(widths[-2], widths[-1], 3, rng, stride=2))
            self.stages.append(Stage(widths, counts, rng))
        self.refine = MFA(c, rng) if config.use_mfa else BasicBlock(c, rng)

    def forward(self, image: Tensor) -> FeaturePyramid:
        w, h = self.config.input_size
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"backbone expects (N, 3, H, W) images, got {image.shape}")
        unit = self.config.heatmap_stride * 2 ** (self.config.num_branches - 1)
        if image.shape[2] % unit or image.shape[3] % unit:
            raise ShapeError(f"image dims {image.shape[2:]} must be divisible by {unit}")
        x = self.stem2(self.stem1(image))
        feats = self.stages[0]([x])
        tops = []
        for trans, stage in zip(self.transitions, self.stages[1:]):
            feats = stage(feats + [trans(feats[-1])])
            tops.append(feats[0])
        tops[-1] = self.refine(tops[-1])
        return FeaturePyramid(*tops)


def build_backbone(config: ModelConfig, seed: int = 0) -> Backbone:
    return Backbone(config, np.random.default_rng(seed))

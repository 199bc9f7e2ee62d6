"""Global relation modeling: cross-stage fusion plus parallel channel/spatial attention."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import Conv2d, Linear, Module
from .tensor import ShapeError, Tensor


class SEBlock(Module):
    """GAP -> relu -> FC -> sigmoid, added back onto the input, then a 1x1 conv.

    The recalibration is additive (``p + s``), not the usual channel-wise
    product.
    """

    def __init__(self, c: int, rng: np.random.Generator):
        self.c = c
        self.fc = Linear(c, c, rng)
        self.post = Conv2d(c, c, 1, rng)

    def squeeze(self, p: Tensor) -> Tensor:
        return T.sigmoid(self.fc(T.relu(T.global_avg_pool(p))))

    def forward(self, p: Tensor) -> Tensor:
        if p.ndim != 4 or p.shape[1] != self.c:
            raise ShapeError(f"SE block expects (N, {self.c}, H, W), got {p.shape}")
        return self.post(T.add(p, self.squeeze(p)))


class ChannelAttention(Module):
    def __init__(self, c: int, rng: np.random.Generator):
        self.w_d = Conv2d(c, c // 2, 1, rng)  # values
        self.w_e = Conv2d(c, 1, 1, rng, bias=False)  # query; softmax cancels a bias
        self.w_c = Conv2d(c // 2, c, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        v = T.reshape(self.w_d(x), (n, c // 2, h * w))
        q = T.softmax_axis(T.reshape(self.w_e(x), (n, h * w, 1)), axis=1)
        z = T.reshape(T.matmul(v, q), (n, c // 2, 1, 1))
        return T.sigmoid(self.w_c(z))


class SpatialAttention(Module):
    def __init__(self, c: int, rng: np.random.Generator):
        self.w_d = Conv2d(c, c // 2, 1, rng)  # values
        self.w_e = Conv2d(c, c // 2, 1, rng)  # pooled query

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        q = T.softmax_axis(T.reshape(T.global_avg_pool(self.w_e(x)), (n, 1, c // 2)), axis=2)
        v = T.reshape(self.w_d(x), (n, c // 2, h * w))
        return T.sigmoid(T.reshape(T.matmul(q, v), (n, 1, h, w)))


class GRM(Module):
    def __init__(self, c: int, rng: np.random.Generator):
        if c % 2:
            raise ShapeError(f"GRM needs an even channel count, got {c}")
        self.c = c
        self.se1 = SEBlock(c, rng)
        self.se2 = SEBlock(c, rng)
        self.w_a = Conv2d(c, c, 3, rng)
        self.w_b = Conv2d(c, c, 3, rng)
        self.fuse = Conv2d(2 * c, c, 1, rng)
        self.ch_att = ChannelAttention(c, rng)
        self.sp_att = SpatialAttention(c, rng)

    def fuse_stages(self, p1: Tensor, p2: Tensor, p3: Tensor) -> Tensor:
        if not (p1.shape == p2.shape == p3.shape):
            raise ShapeError(f"GRM pyramid shapes differ: {p1.shape}, {p2.shape}, {p3.shape}")
        if p1.ndim != 4 or p1.shape[1] != self.c:
            raise ShapeError(f"GRM expects (N, {self.c}, H, W) features, got {p1.shape}")
        prior = T.add(self.w_a(self.se1(p1)), self.w_b(self.se2(p2)))
        return self.fuse(T.concat_channels([prior, p3]))

    def channel_attention(self, x: Tensor) -> Tensor:
        return self.ch_att(x)

    def spatial_attention(self, x: Tensor) -> Tensor:
        return self.sp_att(x)

    def forward(self, p1: Tensor, p2: Tensor, p3: Tensor) -> Tensor:
        x = self.fuse_stages(p1, p2, p3)
        return T.add(T.mul(self.channel_attention(x), x), T.mul(self.spatial_attention(x), x))

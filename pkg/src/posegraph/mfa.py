"""Multi-branch feature align: a 4-branch dense step block."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import RELU_GAIN, BatchNorm2d, Conv2d, Module
from .tensor import ShapeError, Tensor

NUM_BRANCHES = 4


def dense_layer_input_width(b: int, l: int, c: int) -> int:
    """Input channels of dense layer ``l`` in branch ``b`` (both 1-based)."""
    if not (1 <= l <= b <= NUM_BRANCHES):
        raise ValueError(f"need 1 <= l <= b <= {NUM_BRANCHES}, got b={b}, l={l}")
    if c % NUM_BRANCHES:
        raise ValueError(f"channel count {c} not divisible by {NUM_BRANCHES}")
    return l * c // NUM_BRANCHES


class DenseLayer(Module):
    """3x3 conv -> BN -> relu."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.conv = Conv2d(cin, cout, 3, rng, bias=False, gain=RELU_GAIN)  # BN cancels a bias
        self.bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(x)))


class MFA(Module):
    def __init__(self, c: int, rng: np.random.Generator):
        if c % NUM_BRANCHES:
            raise ShapeError(f"MFA needs channels divisible by {NUM_BRANCHES}, got {c}")
        self.c = c
        g = c // NUM_BRANCHES
        self.entry = Conv2d(c, c, 1, rng)
        self.branches = [
            [DenseLayer(dense_layer_input_width(b, l, c), g, rng) for l in range(1, b + 1)]
            for b in range(1, NUM_BRANCHES + 1)
        ]
        self.exit = Conv2d(c, c, 1, rng)

    def _children(self):
        yield "entry", self.entry
        for b, layers in enumerate(self.branches):
            for l, layer in enumerate(layers):
                yield f"branches.{b}.{l}", layer
        yield "exit", self.exit

    def branch_outputs(self, x: Tensor) -> list[Tensor]:
        if x.ndim != 4 or x.shape[1] != self.c:
            raise ShapeError(f"MFA expects (N, {self.c}, H, W), got {x.shape}")
        slices = T.split_channels(self.entry(x), NUM_BRANCHES)
        outs: list[Tensor] = []
        prev = None
        for x0, layers in zip(slices, self.branches):
            h = x0 if prev is None else T.add(x0, prev)
            ys = [layers[0](h)]
            for layer in layers[1:]:
                ys.append(layer(T.concat_channels([x0] + ys)))
            prev = ys[-1]
            outs.append(prev)
        return outs

    def forward(self, x: Tensor) -> Tensor:
        return self.exit(T.concat_channels(self.branch_outputs(x)))

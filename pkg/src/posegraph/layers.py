"""Small module system on top of :mod:`posegraph.tensor`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    """Container that discovers parameters, buffers and children by attribute."""

    training = True

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                name = prefix + key
                val.name = name
                yield name, val
        for key, child in self._children():
            yield from child.named_parameters(prefix + key + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, val in getattr(self, "_buffers", {}).items():
            yield prefix + key, val
        for key, child in self._children():
            yield from child.named_buffers(prefix + key + ".")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


RELU_GAIN = math.sqrt(2.0)


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, gain: float = RELU_GAIN) -> np.ndarray:
    """Fan-in uniform init with variance ``gain**2 / fan_in``."""
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    """Convolution with 'same' padding for odd kernels.

    ``gain`` defaults to 1 (variance preserving), suited to convs whose
    output is not rectified; ConvBN passes the relu gain.
    """

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1, bias: bool = True,
                 gain: float = 1.0):
        self.stride = stride
        self.padding = k // 2
        self.weight = Parameter(kaiming_uniform(rng, (cout, cin, k, k), cin * k * k, gain))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(c))
        self.beta = Parameter(np.zeros(c))
        self.momentum = momentum
        self.eps = eps
        self._buffers = {"running_mean": np.zeros(c), "running_var": np.ones(c)}

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(
            x,
            self.gamma,
            self.beta,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class ConvBN(Module):
    """conv -> batch norm, optionally followed by relu."""

    def __init__(self, cin, cout, k, rng, stride=1, act=True):
        self.conv = Conv2d(cin, cout, k, rng, stride=stride, bias=False, gain=RELU_GAIN if act else 1.0)
        self.bn = BatchNorm2d(cout)
        self.act = act

    def forward(self, x):
        y = self.bn(self.conv(x))
        return T.relu(y) if self.act else y


class BasicBlock(Module):
    """Two 3x3 conv/BN layers with an identity skip."""

    def __init__(self, c: int, rng: np.random.Generator):
        self.c1 = ConvBN(c, c, 3, rng)
        self.c2 = ConvBN(c, c, 3, rng, act=False)

    def forward(self, x):
        return T.relu(T.add(self.c2(self.c1(x)), x))


class Linear(Module):
    """Fully connected layer acting on the channel axis of an (N, C, 1, 1) map."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(cin)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(cin, cout)))
        self.bias = Parameter(np.zeros(cout))

    def forward(self, x: Tensor) -> Tensor:
        n, c = x.shape[:2]
        flat = T.reshape(x, (n, c))
        out = T.add(T.matmul(flat, self.weight), self.bias)
        return T.reshape(out, (n, -1, 1, 1) if x.ndim == 4 else (n, -1))

"""Finite-difference gradient checks for every differentiable building block.

``CHECKS`` maps a module name to a zero-argument callable that returns the
worst relative error over the probed input and parameter coordinates.
Shapes are tiny so the whole registry runs in seconds.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .grm import GRM, ChannelAttention, SEBlock, SpatialAttention
from .heads import Head, ae_loss, encode_targets, heatmap_loss, total_loss
from .layers import BasicBlock, BatchNorm2d, Conv2d, Linear, Module
from .mfa import MFA
from .tensor import Tensor

THRESHOLD = 1e-3
PRIMITIVE_THRESHOLD = 1e-4
EPS = 1e-6
PROBES = 24


def _projector(shape, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(shape)


def _scalarize(y: Tensor, seed: int = 99) -> Tensor:
    """Random linear functional so every output coordinate contributes."""
    return T.sum_all(T.mul(y, _projector(y.shape, seed)))


def _input(shape, seed: int = 1) -> Tensor:
    return Tensor(np.random.default_rng(seed).standard_normal(shape))


def check_function(fn: Callable[..., Tensor], inputs: list[Tensor], params: list[T.Parameter] = (),
                   max_entries: int = PROBES, eps: float = EPS) -> float:
    """Worst error over each input and each parameter of ``fn(*inputs)``."""
    worst = 0.0
    for i, x in enumerate(inputs):
        def f(v, i=i):
            args = list(inputs)
            args[i] = v
            return fn(*args)

        worst = max(worst, T.grad_check(f, x, eps=eps, max_entries=max_entries, seed=i))
    for j, p in enumerate(params):
        worst = max(worst, T.grad_check(lambda _: fn(*inputs), p, eps=eps, max_entries=max_entries, seed=100 + j))
    return worst


def check_module(module: Module, inputs: list[Tensor], max_entries: int = PROBES) -> float:
    return check_function(lambda *xs: _scalarize(module(*xs)), inputs, module.parameters(), max_entries)


def _primitive_checks() -> dict[str, Callable[[], float]]:
    a = _input((2, 3, 4, 5), 1)
    b = _input((2, 3, 4, 5), 2)
    row = _input((1, 3, 1, 1), 3)
    w = _input((4, 3, 3, 3), 4)
    bias = _input((4,), 5)
    gamma = _input((3,), 6)
    beta = _input((3,), 7)
    m1 = _input((2, 3, 4), 8)
    m2 = _input((2, 4, 5), 9)
    s = lambda y: _scalarize(y)  # noqa: E731
    return {
        "op.add": lambda: check_function(lambda x, y: s(T.add(x, y)), [a, row]),
        "op.sub": lambda: check_function(lambda x, y: s(T.sub(x, y)), [a, b]),
        "op.mul": lambda: check_function(lambda x, y: s(T.mul(x, y)), [a, row]),
        "op.relu": lambda: check_function(lambda x: s(T.relu(x)), [a]),
        "op.sigmoid": lambda: check_function(lambda x: s(T.sigmoid(x)), [a]),
        "op.exp": lambda: check_function(lambda x: s(T.exp(x)), [a]),
        "op.square": lambda: check_function(lambda x: s(T.square(x)), [a]),
        "op.softmax": lambda: check_function(lambda x: s(T.softmax_axis(x, -1)), [a]),
        "op.matmul": lambda: check_function(lambda x, y: s(T.matmul(x, y)), [m1, m2]),
        "op.reshape_transpose": lambda: check_function(
            lambda x: s(T.transpose(T.reshape(x, (2, 3, 20)), (0, 2, 1))), [a]),
        "op.concat_split": lambda: check_function(
            lambda x, y: s(T.mul(T.split_channels(T.concat_channels([x, y]), 2)[1], T.channel_slice(x, 0, 3))),
            [a, b]),
        "op.global_avg_pool": lambda: check_function(lambda x: s(T.global_avg_pool(x)), [a]),
        "op.flip_w": lambda: check_function(lambda x: s(T.flip_w(x)), [a]),
        "op.conv2d": lambda: check_function(lambda x, k, c: s(T.conv2d(x, k, c, stride=1, padding=1)), [a, w, bias]),
        "op.conv2d_stride2": lambda: check_function(lambda x, k: s(T.conv2d(x, k, None, stride=2, padding=1)), [a, w]),
        "op.batch_norm": lambda: check_function(
            lambda x, g, bb: s(T.batch_norm(x, g, bb, np.zeros(3), np.ones(3), training=True)), [a, gamma, beta]),
        "op.upsample_nearest": lambda: check_function(lambda x: s(T.upsample_nearest(x, 2)), [a]),
        "op.resize_bilinear": lambda: check_function(lambda x: s(T.resize_bilinear(x, (7, 9))), [a]),
        "op.mean_all": lambda: check_function(lambda x: T.mean_all(T.square(x)), [a]),
    }


def _module_checks() -> dict[str, Callable[[], float]]:
    rng = lambda: np.random.default_rng(0)  # noqa: E731
    c = 8
    x = lambda seed=1: _input((2, c, 4, 4), seed)  # noqa: E731

    def heads():
        head = Head(c, 3, 1, rng())
        f = x()
        return check_function(lambda v: _scalarize(head(v).heatmaps) + _scalarize(head(v).tagmaps, 7), [f],
                              head.parameters())

    def losses():
        anns = [np.array([[1.0, 2.0, 2], [9.0, 5.0, 2], [14.0, 14.0, 1]]),
                np.array([[6.0, 13.0, 2], [3.0, 9.0, 2], [0.0, 0.0, 0]])]
        encs = [encode_targets(anns, (4, 4), sigma=1.0, stride=4)] * 2
        heat = Tensor(np.random.default_rng(3).uniform(0.05, 0.95, (2, 3, 4, 4)))
        tags = _input((2, 3, 4, 4), 4)
        target = np.stack([e.heatmaps for e in encs])
        from .heads import HeadOutput

        def f(h, t):
            return total_loss(HeadOutput(h, t), target, encs).total

        worst = check_function(f, [heat, tags])
        worst = max(worst, check_function(lambda h: heatmap_loss(h, target), [heat]))
        pull_push = lambda t: T.add(*ae_loss(t, encs))  # noqa: E731
        return max(worst, check_function(pull_push, [tags]))

    return {
        "conv": lambda: check_module(Conv2d(c, c, 3, rng(), stride=1), [x()]),
        "batchnorm": lambda: check_module(BatchNorm2d(c), [x()]),
        "basic_block": lambda: check_module(BasicBlock(c, rng()), [x()]),
        "linear": lambda: check_module(Linear(c, 4, rng()), [_input((2, c, 1, 1))]),
        "se_block": lambda: check_module(SEBlock(c, rng()), [x()]),
        "channel_attention": lambda: check_module(ChannelAttention(c, rng()), [x()]),
        "spatial_attention": lambda: check_module(SpatialAttention(c, rng()), [x()]),
        "grm": lambda: check_module(GRM(c, rng()), [x(1), x(2), x(3)]),
        "mfa": lambda: check_module(MFA(c, rng()), [x()]),
        "heads": heads,
        "losses": losses,
    }


def default_checks() -> dict[str, tuple[Callable[[], float], float]]:
    out = {name: (fn, PRIMITIVE_THRESHOLD) for name, fn in _primitive_checks().items()}
    out.update({name: (fn, THRESHOLD) for name, fn in _module_checks().items()})
    return out


CHECKS = default_checks()


def run_checks(checks: dict | None = None) -> list[tuple[str, float, float, bool]]:
    """``(name, max_rel_error, threshold, ok)`` for each registered check."""
    rows = []
    for name, (fn, limit) in (checks if checks is not None else CHECKS).items():
        with np.errstate(all="ignore"):
            err = float(fn())
        rows.append((name, err, limit, bool(err < limit)))
    return rows


def format_row(name: str, err: float, limit: float, ok: bool) -> str:
    return f"gradcheck module={name} max_rel_error={err:.3e} threshold={limit:.0e} status={'PASS' if ok else 'FAIL'}"

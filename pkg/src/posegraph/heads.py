"""Heatmap/tag heads, Gaussian target encoding and training losses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import Conv2d, Module
from .tensor import ShapeError, Tensor


@dataclass
class HeadOutput:
    heatmaps: Tensor  # (N, K, H', W'), in (0, 1)
    tagmaps: Tensor  # (N, K * tag_dim, H', W')


# prediction convs start near zero so the heatmap sigmoid is not saturated
HEAD_INIT_GAIN = 0.01


class Head(Module):
    def __init__(self, c: int, k: int, tag_dim: int, rng: np.random.Generator):
        self.c = c
        self.k = k
        self.tag_dim = tag_dim
        self.heat = Conv2d(c, k, 1, rng, gain=HEAD_INIT_GAIN)
        self.tag = Conv2d(c, k * tag_dim, 1, rng, gain=HEAD_INIT_GAIN)

    def forward(self, f: Tensor) -> HeadOutput:
        if f.ndim != 4 or f.shape[1] != self.c:
            raise ShapeError(f"head expects (N, {self.c}, H, W), got {f.shape}")
        return HeadOutput(T.sigmoid(self.heat(f)), self.tag(f))


@dataclass
class TargetEncoding:
    """Targets for one image.

    ``instances`` holds, per person, a list of ``(k, flat_index, v)`` for every
    keypoint that landed on the grid with ``v > 0``.
    """

    heatmaps: np.ndarray
    instances: list = field(default_factory=list)


def keypoint_to_cell(x: float, y: float, stride: int) -> tuple[int, int]:
    """Nearest grid cell (row, col) for an input-pixel coordinate."""
    return int(np.floor(y / stride)), int(np.floor(x / stride))


def encode_targets(annotations, grid: tuple[int, int], sigma: float = 2.0, stride: int = 4,
                   num_keypoints: int | None = None) -> TargetEncoding:
    """Render per-type Gaussian targets (max over people) on the heatmap grid.

    ``annotations`` is a list of ``(K, 3)`` arrays of ``(x, y, v)`` in input
    pixels.  Keypoints whose cell falls outside the grid are skipped.  Pass
    ``num_keypoints`` so an image without people still yields K empty maps.
    """
    gh, gw = grid
    anns = [np.asarray(a, dtype=float) for a in annotations]
    k = num_keypoints if num_keypoints is not None else (anns[0].shape[0] if anns else 0)
    heat = np.zeros((k, gh, gw))
    ys = np.arange(gh)[:, None]
    xs = np.arange(gw)[None, :]
    instances = []
    for kps in anns:
        entries = []
        for j, (x, y, v) in enumerate(kps):
            if v <= 0:
                continue
            r, c = keypoint_to_cell(x, y, stride)
            if not (0 <= r < gh and 0 <= c < gw):
                continue
            g = np.exp(-((ys - r) ** 2 + (xs - c) ** 2) / (2.0 * sigma**2))
            np.maximum(heat[j], g, out=heat[j])
            entries.append((j, r * gw + c, int(v)))
        instances.append(entries)
    return TargetEncoding(heat, instances)


def heatmap_loss(pred: Tensor, target) -> Tensor:
    target = T.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"heatmap_loss: pred {pred.shape} vs target {target.shape}")
    return T.mean_all(T.square(T.sub(pred, target)))


def _gather_tags(tagmaps: Tensor, b: int, entries, tag_dim: int) -> Tensor:
    """Tags of one instance as a (len(entries), tag_dim) tensor."""
    n, kd, h, w = tagmaps.shape
    idx = [(b, j * tag_dim + d, flat // w, flat % w) for j, flat, _ in entries for d in range(tag_dim)]
    bi, ci, ri, wi = (np.array(a) for a in zip(*idx))
    data = tagmaps.data[bi, ci, ri, wi].reshape(len(entries), tag_dim)

    def bw(g):
        full = np.zeros_like(tagmaps.data)
        np.add.at(full, (bi, ci, ri, wi), g.reshape(-1))
        T._accum(tagmaps, full)

    return T._make(data, (tagmaps,), bw)


def ae_loss(tagmaps: Tensor, encodings, tag_dim: int = 1, sigma_tag: float = 1.0) -> tuple[Tensor, Tensor]:
    """Associative-embedding pull/push losses averaged over the batch.

    ``encodings`` is one :class:`TargetEncoding` (batch of one) or a list with
    one per batch item.  Pull is the mean squared deviation of each person's
    tags from their reference (mean) tag; push is the mean over ordered pairs
    of distinct people of ``exp(-|mean_n - mean_m|^2 / (2 sigma_tag^2))``.
    """
    if isinstance(encodings, TargetEncoding):
        encodings = [encodings]
    pulls, pushes = [], []
    for b, enc in enumerate(encodings):
        means, pull_terms = [], []
        for entries in enc.instances:
            if not entries:
                continue
            tags = _gather_tags(tagmaps, b, entries, tag_dim)
            mean = T.scale(_col_sum(tags), 1.0 / len(entries))
            pull_terms.append(T.scale(T.sum_all(T.square(T.sub(tags, mean))), 1.0 / len(entries)))
            means.append(mean)
        m = len(means)
        pulls.append(T.scale(T.add_n(pull_terms), 1.0 / m) if m else Tensor(0.0))
        if m < 2:
            pushes.append(Tensor(0.0))
            continue
        stacked = _stack_rows(means)
        diff = T.sub(T.reshape(stacked, (m, 1, tag_dim)), T.reshape(stacked, (1, m, tag_dim)))
        e = T.exp(T.scale(_row_sqnorm(diff), -1.0 / (2.0 * sigma_tag**2)))
        offdiag = np.ones((m, m)) - np.eye(m)
        pushes.append(T.scale(T.sum_all(T.mul(e, offdiag)), 1.0 / (m * (m - 1))))
    nb = len(encodings)
    return T.scale(T.add_n(pulls), 1.0 / nb), T.scale(T.add_n(pushes), 1.0 / nb)


def _col_sum(x: Tensor) -> Tensor:
    ones = Tensor(np.ones((1, x.shape[0])))
    return T.matmul(ones, x)


def _stack_rows(rows: list[Tensor]) -> Tensor:
    """Stack (1, D) tensors into (m, D)."""
    data = np.concatenate([r.data.reshape(1, -1) for r in rows], axis=0)

    def bw(g):
        for i, r in enumerate(rows):
            T._accum(r, g[i].reshape(r.shape))

    return T._make(data, tuple(rows), bw)


def _row_sqnorm(x: Tensor) -> Tensor:
    """Sum of squares over the last axis."""
    data = (x.data**2).sum(axis=-1)

    def bw(g):
        T._accum(x, 2.0 * x.data * g[..., None])

    return T._make(data, (x,), bw)


@dataclass
class LossBreakdown:
    total: Tensor
    heatmap: float
    pull: float
    push: float


def total_loss(pred: HeadOutput, targets, encodings, lambda_pull: float = 0.1, lambda_push: float = 0.1,
               tag_dim: int = 1) -> LossBreakdown:
    """Heatmap MSE plus weighted AE pull/push."""
    hm = heatmap_loss(pred.heatmaps, targets)
    pull, push = ae_loss(pred.tagmaps, encodings, tag_dim=tag_dim)
    total = T.add(hm, T.add(T.scale(pull, lambda_pull), T.scale(push, lambda_push)))
    return LossBreakdown(total, hm.item(), pull.item(), push.item())

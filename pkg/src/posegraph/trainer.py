"""Training loop, overfit probe and the per-epoch CSV log."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .config import TrainConfig
from .heads import encode_targets, total_loss
from .model import PoseNet
from .synth import Sample, augment

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "mean_loss", "heatmap_loss", "pull", "push", "lr")
PIXEL_MEAN = 0.5


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, components: dict):
        self.epoch = epoch
        self.batch = batch
        self.components = components
        parts = ", ".join(f"{k}={v!r}" for k, v in components.items())
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {parts}")


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)

    def append(self, **row) -> None:
        self.rows.append({c: row[c] for c in LOG_COLUMNS})

    @property
    def losses(self) -> list[float]:
        return [r["mean_loss"] for r in self.rows]

    @property
    def lrs(self) -> list[float]:
        return [r["lr"] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.rows:
            w.writerow([r["epoch"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read(cls, path) -> "TrainingLog":
        out = cls()
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                out.rows.append({"epoch": int(r["epoch"]), **{c: float(r[c]) for c in LOG_COLUMNS[1:]}})
        return out


def prepare_batch(samples: Sequence[Sample], grid, sigma: float, stride: int, num_keypoints: int):
    """Stack images (mean-shifted) and encode targets for a list of samples."""
    images = np.stack([s.image for s in samples]) - PIXEL_MEAN
    encs = [encode_targets([a.keypoints for a in s.anns], grid, sigma=sigma, stride=stride,
                           num_keypoints=num_keypoints) for s in samples]
    return images, np.stack([e.heatmaps for e in encs]), encs


def _augmented(sample: Sample, seed: int, epoch: int, index: int) -> Sample:
    rng = np.random.default_rng([seed, epoch, index])
    image, anns = augment(sample.image, sample.anns, rng=rng)
    return Sample(sample.image_id, image, anns)


def forward_loss(model: PoseNet, images, heatmaps, encs, cfg: TrainConfig):
    """Forward pass and loss breakdown for one prepared batch."""
    mc = model.config
    out = model(T.Tensor(images))
    lb = total_loss(out, heatmaps, encs, cfg.lambda_pull, cfg.lambda_push, tag_dim=mc.tag_dim)
    return lb, out


def _check_finite(lb, epoch, batch):
    comps = {"total": lb.total.item(), "heatmap": lb.heatmap, "pull": lb.pull, "push": lb.push}
    if not all(math.isfinite(v) for v in comps.values()):
        raise NonFiniteLossError(epoch, batch, comps)


def _update(model: PoseNet, lb, cfg: TrainConfig, lr: float) -> None:
    params = model.parameters()
    T.backward(lb.total)
    if cfg.clip_norm is not None:
        T.clip_grad_norm(params, cfg.clip_norm)
    T.adam_step(params, lr)
    model.zero_grad()


def train(
    model: PoseNet,
    dataset: Sequence[Sample],
    cfg: TrainConfig,
    start_epoch: int = 0,
    checkpoint_dir=None,
    history: TrainingLog | None = None,
) -> TrainingLog:
    """Train ``model`` in place from ``start_epoch`` to ``cfg.epochs``.

    Each epoch visits the dataset in a seeded permutation.  When
    ``checkpoint_dir`` is set and ``cfg.checkpoint_every`` > 0 a checkpoint
    is written every that many epochs.
    """
    if not dataset:
        raise ValueError("train: dataset is empty")
    cfg.validate()
    mc = model.config
    grid = mc.grid_size
    stride = mc.heatmap_stride
    out = history if history is not None else TrainingLog()
    model.train()
    for epoch in range(start_epoch, cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset))
        sums = np.zeros(4)
        n_batches = 0
        for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            batch = [_augmented(dataset[i], cfg.seed, epoch, int(i)) if cfg.augment else dataset[i] for i in idx]
            images, heat, encs = prepare_batch(batch, grid, cfg.sigma, stride, mc.keypoint_count)
            lb, _ = forward_loss(model, images, heat, encs, cfg)
            _check_finite(lb, epoch, b)
            sums += (lb.total.item(), lb.heatmap, lb.pull, lb.push)
            n_batches += 1
            _update(model, lb, cfg, lr)
        mean = sums / n_batches
        out.append(epoch=epoch + 1, mean_loss=mean[0], heatmap_loss=mean[1], pull=mean[2], push=mean[3], lr=lr)
        log.info("epoch %d loss %.5f hm %.5f pull %.5f push %.5f lr %g", epoch + 1, *mean, lr)
        if checkpoint_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"epoch_{epoch + 1:03d}.json", model, mc, epoch + 1,
                            extra={"log": out.rows})
    return out


def batch_loss(model: PoseNet, samples: Sequence[Sample], cfg: TrainConfig) -> float:
    """Total loss on ``samples`` without updating anything but BN statistics."""
    mc = model.config
    images, heat, encs = prepare_batch(samples, mc.grid_size, cfg.sigma, mc.heatmap_stride, mc.keypoint_count)
    with T.no_grad():
        lb, _ = forward_loss(model, images, heat, encs, cfg)
    return lb.total.item()


def overfit_probe(model: PoseNet, single_batch: Sequence[Sample], steps: int, cfg: TrainConfig | None = None,
                  lr: float | None = None) -> float:
    """Take ``steps`` updates on one fixed batch (no augmentation); return the last loss.

    With ``steps == 0`` this is the initial loss.  The returned value is the
    loss evaluated after the final update.
    """
    cfg = cfg or TrainConfig(augment=False)
    lr = cfg.base_lr if lr is None else lr
    mc = model.config
    model.train()
    images, heat, encs = prepare_batch(single_batch, mc.grid_size, cfg.sigma, mc.heatmap_stride, mc.keypoint_count)
    for step in range(steps):
        lb, _ = forward_loss(model, images, heat, encs, cfg)
        _check_finite(lb, 0, step)
        _update(model, lb, cfg, lr)
    with T.no_grad():
        lb, _ = forward_loss(model, images, heat, encs, cfg)
    _check_finite(lb, 0, steps)
    return lb.total.item()

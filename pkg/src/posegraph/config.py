"""Run configuration: model, training, scene synthesis, decoding and TTA.

All sections are plain dataclasses.  :func:`load_run_config` reads one JSON
document, rejects unknown keys and validates every field before anything
else touches the filesystem.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

SCHEMA_VERSION = 1

A_OURS = [[4], [0, 4], [0, 0, 4], [0, 0, 0, 4]]
A_ORI = [[4], [4, 4], [4, 4, 4], [4, 4, 4, 4]]
A_DESK = [[1], [0, 1], [0, 0, 1], [0, 0, 0, 1]]

# COCO per-keypoint falloff constants (sigmas), for K=17 runs
COCO_KEYPOINT_SIGMAS = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072,
    0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089,
]


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_stages: int = 4
    block_counts: list = field(default_factory=lambda: [list(a) for a in A_OURS])
    base_width: int = 16
    keypoint_count: int = 5
    input_size: tuple = (64, 64)  # (W, H)
    tag_dim: int = 1
    heatmap_stride: int = 4
    schema: str = "shrunken"  # or "full" for the unshrunk HRNet layout
    use_grm: bool = True
    use_mfa: bool = True

    @property
    def num_branches(self) -> int:
        return self.num_stages

    def branch_width(self, b: int) -> int:
        """Channels of 1-based branch ``b``."""
        return self.base_width * 2 ** (b - 1)

    @property
    def grid_size(self) -> tuple:
        """Heatmap grid as (H', W')."""
        w, h = self.input_size
        return h // self.heatmap_stride, w // self.heatmap_stride

    def validate(self) -> "ModelConfig":
        if self.num_stages != 4:
            raise ConfigError(f"num_stages must be 4, got {self.num_stages}")
        a = self.block_counts
        if not isinstance(a, list) or len(a) != self.num_stages:
            raise ConfigError(f"block_counts must list {self.num_stages} stages, got {a!r}")
        for n, stage in enumerate(a, start=1):
            if not isinstance(stage, list) or len(stage) != n:
                raise ConfigError(f"block_counts stage {n} must have {n} entries, got {stage!r}")
            if any((not isinstance(c, int)) or c < 0 for c in stage):
                raise ConfigError(f"block_counts stage {n} has invalid counts {stage!r}")
            if stage[-1] < 1:
                raise ConfigError(f"block_counts stage {n}: last branch needs at least one block")
            if self.schema == "shrunken" and any(stage[:-1]):
                raise ConfigError(
                    f"block_counts stage {n} = {stage}: shrunken schema allows blocks only in the last branch"
                )
        if self.schema not in ("shrunken", "full"):
            raise ConfigError(f"schema must be 'shrunken' or 'full', got {self.schema!r}")
        c = self.base_width
        if c <= 0 or c % 4:
            raise ConfigError(f"base_width must be a positive multiple of 4, got {c}")
        if self.keypoint_count < 1:
            raise ConfigError("keypoint_count must be >= 1")
        if self.tag_dim < 1:
            raise ConfigError("tag_dim must be >= 1")
        if self.heatmap_stride != 4:
            raise ConfigError(f"heatmap_stride is fixed at 4 (two stride-2 stem convs), got {self.heatmap_stride}")
        w, h = self.input_size
        unit = self.heatmap_stride * 2 ** (self.num_branches - 1)
        if w % unit or h % unit or w <= 0 or h <= 0:
            raise ConfigError(f"input_size {self.input_size} must be divisible by {unit}")
        return self


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    base_lr: float = 1e-3
    milestones: list = field(default_factory=lambda: [19, 26])
    lr_decay: float = 0.1
    seed: int = 0
    lambda_pull: float = 0.1
    lambda_push: float = 0.1
    sigma: float = 1.5  # target Gaussian width in heatmap cells
    checkpoint_every: int = 0  # epochs; 0 disables intermediate checkpoints
    clip_norm: float | None = 5.0
    augment: bool = True

    def validate(self) -> "TrainConfig":
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be > 0")
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError(f"milestones must be strictly increasing, got {ms}")
        if ms and (ms[0] < 1 or ms[-1] >= self.epochs):
            raise ConfigError(f"milestones must lie in [1, epochs), got {ms} with epochs={self.epochs}")
        if self.sigma <= 0:
            raise ConfigError("sigma must be > 0")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be > 0 or null")
        return self

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``."""
        drops = sum(1 for m in self.milestones if epoch >= m)
        return self.base_lr * self.lr_decay ** drops


@dataclass
class SceneSpec:
    seed: int = 0
    image_size: tuple = (64, 64)  # (W, H)
    persons_range: tuple = (1, 4)
    keypoint_count: int = 5
    bone_scale: tuple = (0.75, 1.1)
    arm_angle_range: tuple = (20.0, 80.0)  # degrees below horizontal
    leg_angle_range: tuple = (8.0, 30.0)  # degrees from vertical
    occlusion_prob: float = 0.2
    noise_level: float = 0.05
    train_count: int = 200
    eval_count: int = 50

    def validate(self) -> "SceneSpec":
        lo, hi = self.persons_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"persons_range must satisfy 1 <= lo <= hi, got {self.persons_range}")
        if self.keypoint_count != 5:
            raise ConfigError("the synthetic skeleton has exactly 5 keypoints")
        for name in ("occlusion_prob", "noise_level"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.bone_scale[0] <= 0 or self.bone_scale[0] > self.bone_scale[1]:
            raise ConfigError(f"bone_scale invalid: {self.bone_scale}")
        if self.train_count < 0 or self.eval_count < 0:
            raise ConfigError("scene counts must be >= 0")
        w, h = self.image_size
        if w < 32 or h < 32:
            raise ConfigError(f"image_size too small: {self.image_size}")
        return self


@dataclass
class DecodeConfig:
    detection_threshold: float = 0.2
    window: int = 3
    max_per_type: int = 30
    tag_threshold: float = 1.0
    max_instances: int = 20
    fill_missing: bool = True
    keypoint_constant: float = 0.1
    area_scale: float = 0.125  # desk 64 px vs benchmark 512 px

    def validate(self) -> "DecodeConfig":
        if not 0.0 < self.detection_threshold < 1.0:
            raise ConfigError("detection_threshold must lie in (0, 1)")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError("window must be an odd positive integer")
        if self.max_per_type < 1 or self.max_instances < 1:
            raise ConfigError("max_per_type and max_instances must be >= 1")
        if self.tag_threshold <= 0 or self.keypoint_constant <= 0 or self.area_scale <= 0:
            raise ConfigError("tag_threshold, keypoint_constant and area_scale must be > 0")
        return self


@dataclass
class TTAConfig:
    flip: bool = False
    scales: list = field(default_factory=lambda: [1.0])

    def validate(self) -> "TTAConfig":
        if not self.scales:
            raise ConfigError("scales must be non-empty")
        if any(s <= 0 for s in self.scales):
            raise ConfigError(f"scales must be positive, got {self.scales}")
        return self


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    tta: TTAConfig = field(default_factory=TTAConfig)
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> "RunConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        self.model.validate()
        self.train.validate()
        self.scene.validate()
        self.decode.validate()
        self.tta.validate()
        if tuple(self.scene.image_size) != tuple(self.model.input_size):
            raise ConfigError(
                f"scene.image_size {self.scene.image_size} must equal model.input_size {self.model.input_size}"
            )
        if self.scene.keypoint_count != self.model.keypoint_count:
            raise ConfigError("scene.keypoint_count must equal model.keypoint_count")
        for s in self.tta.scales:
            w, h = self.model.input_size
            unit = self.model.heatmap_stride * 2 ** (self.model.num_branches - 1)
            if (w * s) % unit or (h * s) % unit:
                raise ConfigError(f"TTA scale {s} gives input {(w * s, h * s)} not divisible by {unit}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "scene": SceneSpec,
    "decode": DecodeConfig,
    "tta": TTAConfig,
}

_TUPLE_FIELDS = {"input_size", "image_size", "persons_range", "bone_scale", "arm_angle_range", "leg_angle_range"}


def _section_from_dict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, val in data.items():
        if key in _TUPLE_FIELDS:
            if not isinstance(val, (list, tuple)) or len(val) != 2:
                raise ConfigError(f"{where}.{key} must be a pair, got {val!r}")
            val = tuple(val)
        kwargs[key] = val
    return cls(**kwargs)


def run_config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config document must be a JSON object")
    unknown = set(data) - set(_SECTIONS) - {"schema_version"}
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    kwargs: dict[str, Any] = {k: _section_from_dict(cls, data.get(k, {}), k) for k, cls in _SECTIONS.items()}
    cfg = RunConfig(schema_version=data.get("schema_version", SCHEMA_VERSION), **kwargs)
    seed = os.environ.get("POSEGRAPH_SEED")
    if seed is not None:
        try:
            cfg.train.seed = cfg.scene.seed = int(seed)
        except ValueError as exc:
            raise ConfigError(f"POSEGRAPH_SEED must be an integer, got {seed!r}") from exc
    return cfg.validate()


def load_run_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return run_config_from_dict({})
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
    return run_config_from_dict(data)


def model_config_from_dict(data: dict) -> ModelConfig:
    return _section_from_dict(ModelConfig, data, "model").validate()

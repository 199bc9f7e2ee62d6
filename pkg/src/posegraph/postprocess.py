"""Heatmap/tag decoding, associative-embedding grouping and test-time averaging."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import maximum_filter

from . import tensor as T

FLIP_PAIRS_SYNTH = ((1, 2), (3, 4))


@dataclass
class KeypointCandidate:
    k: int
    row: int
    col: int
    score: float
    tag: np.ndarray
    x: float = 0.0  # input-pixel coordinates after sub-cell refinement
    y: float = 0.0


@dataclass
class PoseInstance:
    """One grouped person.  Empty slots have ``present[k] == False``."""

    num_keypoints: int
    tag_dim: int = 1
    xy: np.ndarray = field(init=False)
    scores: np.ndarray = field(init=False)
    tags: np.ndarray = field(init=False)
    cells: np.ndarray = field(init=False)
    present: np.ndarray = field(init=False)
    filled: np.ndarray = field(init=False)
    mean_tag: np.ndarray = field(init=False)
    _count: int = field(init=False, default=0)

    def __post_init__(self):
        k = self.num_keypoints
        self.xy = np.zeros((k, 2))
        self.scores = np.zeros(k)
        self.tags = np.zeros((k, self.tag_dim))
        self.cells = np.full((k, 2), -1, dtype=int)
        self.present = np.zeros(k, dtype=bool)
        self.filled = np.zeros(k, dtype=bool)
        self.mean_tag = np.zeros(self.tag_dim)

    def add(self, cand: KeypointCandidate) -> None:
        if self.present[cand.k]:
            raise ValueError(f"slot {cand.k} already occupied")
        self.xy[cand.k] = (cand.x, cand.y)
        self.scores[cand.k] = cand.score
        self.tags[cand.k] = cand.tag
        self.cells[cand.k] = (cand.row, cand.col)
        self.present[cand.k] = True
        self._count += 1
        self.mean_tag = self.mean_tag + (np.asarray(cand.tag, dtype=float) - self.mean_tag) / self._count

    @property
    def instance_score(self) -> float:
        """Mean score over occupied slots, back-filled ones included.

        Filling a fragment reads low heatmap values into its empty slots, which
        ranks it below complete people.
        """
        return float(self.scores[self.present].mean()) if self.present.any() else 0.0

    @property
    def num_grouped(self) -> int:
        return int((self.present & ~self.filled).sum())

    def keypoints_flat(self) -> list[float]:
        """COCO result layout ``[x, y, score] * K``."""
        out = []
        for k in range(self.num_keypoints):
            out.extend([float(self.xy[k, 0]), float(self.xy[k, 1]), float(self.scores[k])])
        return out


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, T.Tensor) else np.asarray(x, dtype=float)


def _refine_offset(hm: np.ndarray, r: int, c: int) -> tuple[float, float]:
    """Quarter-cell shift toward the larger neighbour on each axis."""
    h, w = hm.shape
    dy = dx = 0.0
    if 0 < c < w - 1:
        dx = 0.25 * np.sign(hm[r, c + 1] - hm[r, c - 1])
    if 0 < r < h - 1:
        dy = 0.25 * np.sign(hm[r + 1, c] - hm[r - 1, c])
    return float(dx), float(dy)


def detect_peaks(
    heatmaps,
    threshold: float,
    window: int = 3,
    max_per_type: int = 30,
    tagmaps=None,
    stride: int = 4,
    refine: bool = True,
) -> list[KeypointCandidate]:
    """Local maxima over a ``window`` x ``window`` neighbourhood at or above ``threshold``.

    Output is grouped by keypoint type; within a type candidates are ordered
    by descending score with ties broken by (row, col).
    """
    hm = _as_array(heatmaps)
    k_types, h, w = hm.shape
    tags = None if tagmaps is None else _as_array(tagmaps)
    tag_dim = 1 if tags is None else tags.shape[0] // k_types
    local_max = maximum_filter(hm, size=(1, window, window), mode="constant", cval=-np.inf)
    out = []
    for k in range(k_types):
        rows, cols = np.nonzero((hm[k] == local_max[k]) & (hm[k] >= threshold))
        scores = hm[k, rows, cols]
        order = np.lexsort((cols, rows, -scores))[:max_per_type]
        for i in order:
            r, c = int(rows[i]), int(cols[i])
            tag = np.zeros(tag_dim) if tags is None else tags[k * tag_dim:(k + 1) * tag_dim, r, c].copy()
            dx, dy = _refine_offset(hm[k], r, c) if refine else (0.0, 0.0)
            out.append(
                KeypointCandidate(k, r, c, float(hm[k, r, c]), tag,
                                  x=(c + 0.5 + dx) * stride, y=(r + 0.5 + dy) * stride)
            )
    return out


def group_candidates(
    candidates: Sequence[KeypointCandidate],
    tag_threshold: float = 1.0,
    num_keypoints: int | None = None,
) -> list[PoseInstance]:
    """Greedy associative-embedding grouping.

    Types are visited in order 0..K-1 and candidates of a type by descending
    score.  A candidate joins the instance with an empty slot whose mean tag
    is nearest, if that distance is below ``tag_threshold``; otherwise it
    starts a new instance.
    """
    if not candidates:
        return []
    k_total = num_keypoints if num_keypoints is not None else max(c.k for c in candidates) + 1
    tag_dim = len(np.atleast_1d(candidates[0].tag))
    ordered = sorted(candidates, key=lambda c: (c.k, -c.score, c.row, c.col))
    instances: list[PoseInstance] = []
    for cand in ordered:
        tag = np.atleast_1d(np.asarray(cand.tag, dtype=float))
        best, best_d = None, np.inf
        for inst in instances:
            if inst.present[cand.k]:
                continue
            d = float(np.linalg.norm(tag - inst.mean_tag))
            if d < best_d:
                best, best_d = inst, d
        if best is None or best_d >= tag_threshold:
            best = PoseInstance(k_total, tag_dim)
            instances.append(best)
        best.add(cand)
    return instances


def fill_missing(instances: list[PoseInstance], heatmaps, tagmaps, stride: int = 4) -> None:
    """Fill empty slots from the heatmap cell that best trades score against tag distance."""
    hm = _as_array(heatmaps)
    tags = _as_array(tagmaps)
    k_types, h, w = hm.shape
    tag_dim = tags.shape[0] // k_types
    for inst in instances:
        for k in np.nonzero(~inst.present)[0]:
            t = tags[k * tag_dim:(k + 1) * tag_dim]
            dist = np.sqrt(((t - inst.mean_tag[:, None, None]) ** 2).sum(axis=0))
            score_map = hm[k] - dist
            idx = int(np.argmax(score_map))
            r, c = divmod(idx, w)
            dx, dy = _refine_offset(hm[k], r, c)
            inst.xy[k] = ((c + 0.5 + dx) * stride, (r + 0.5 + dy) * stride)
            inst.scores[k] = hm[k, r, c]
            inst.tags[k] = t[:, r, c]
            inst.cells[k] = (r, c)
            inst.present[k] = True
            inst.filled[k] = True


def flip_average(hm, hm_flipped, pairs: Sequence[tuple[int, int]]) -> np.ndarray:
    """Mean of ``hm`` and the un-mirrored, left/right-swapped ``hm_flipped``.

    Works on (K, H, W) or (N, K, H, W) arrays; the channel axis is -3.
    """
    a, b = _as_array(hm), _as_array(hm_flipped)
    if a.shape != b.shape:
        raise ValueError(f"flip_average: shapes differ {a.shape} vs {b.shape}")
    back = swap_pairs(b[..., ::-1], pairs)
    return (a + back) / 2.0


def swap_pairs(x: np.ndarray, pairs: Sequence[tuple[int, int]]) -> np.ndarray:
    perm = np.arange(x.shape[-3])
    for l, r in pairs:
        perm[l], perm[r] = r, l
    return x[..., perm, :, :]


def resize_maps(x: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of the last two axes (half-pixel centres)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-2:] == tuple(size):
        return x.copy()
    ry = T.interp_matrix(x.shape[-2], size[0])
    rx = T.interp_matrix(x.shape[-1], size[1])
    return ry @ x @ rx.T


def multi_scale_average(per_scale_heatmaps: Sequence, scales: Sequence[float] | None = None,
                        target_size: tuple[int, int] | None = None) -> np.ndarray:
    """Resize each map to ``target_size`` and average them.

    The mean is accumulated incrementally so identical inputs reproduce
    themselves bit for bit.
    """
    maps = [_as_array(m) for m in per_scale_heatmaps]
    if not maps:
        raise ValueError("multi_scale_average: no heatmaps given")
    if scales is not None and len(scales) != len(maps):
        raise ValueError(f"multi_scale_average: {len(maps)} maps for {len(scales)} scales")
    size = tuple(target_size) if target_size is not None else maps[0].shape[-2:]
    mean = resize_maps(maps[0], size)
    for i, m in enumerate(maps[1:], start=2):
        mean += (resize_maps(m, size) - mean) / i
    return mean


# ---------------------------------------------------------------------------
# end-to-end decoding


def predict_maps(
    forward: Callable,
    image: np.ndarray,
    flip: bool = False,
    scales: Sequence[float] = (1.0,),
    flip_pairs: Sequence[tuple[int, int]] = FLIP_PAIRS_SYNTH,
    stride: int = 4,
) -> tuple[np.ndarray, np.ndarray]:
    """Heatmaps (K, H', W') and tagmaps for one (3, H, W) image with optional TTA.

    ``forward`` maps an (N, 3, H, W) array to a ``HeadOutput``.  Tags always
    come from the unflipped pass at the scale closest to 1.
    """
    _, h, w = image.shape
    grid = (h // stride, w // stride)
    heat_per_scale = []
    tag_scale = min(scales, key=lambda s: abs(np.log(s)))
    tags = None
    for s in scales:
        img = image if s == 1 else resize_maps(image, (int(round(h * s)), int(round(w * s))))
        batch = img[None] if not flip else np.stack([img, img[:, :, ::-1]])
        out = forward(batch)
        hm = out.heatmaps.data
        heat = hm[0] if not flip else flip_average(hm[0], hm[1], flip_pairs)
        heat_per_scale.append(heat)
        if s == tag_scale:
            tags = resize_maps(out.tagmaps.data[0], grid)
    if len(scales) == 1 and heat_per_scale[0].shape[-2:] == grid:
        return heat_per_scale[0], tags
    return multi_scale_average(heat_per_scale, scales, grid), tags


def decode(heatmaps, tagmaps, cfg, stride: int = 4) -> list[PoseInstance]:
    """Peaks -> greedy grouping -> optional back-filling; ``cfg`` is a DecodeConfig."""
    hm = _as_array(heatmaps)
    cands = detect_peaks(hm, cfg.detection_threshold, cfg.window, cfg.max_per_type, tagmaps, stride)
    instances = group_candidates(cands, cfg.tag_threshold, num_keypoints=hm.shape[0])
    instances.sort(key=lambda p: -p.instance_score)
    instances = instances[: cfg.max_instances]
    if cfg.fill_missing and instances:
        fill_missing(instances, hm, tagmaps, stride)
    return instances

"""Object keypoint similarity and COCO-style AP/AR aggregation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

OKS_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 20


class UndefinedOKSError(ValueError):
    """Ground truth has no labelled keypoints."""


@dataclass
class OksRecord:
    distances: np.ndarray
    visibility: np.ndarray
    scale: float
    constants: np.ndarray

    def __post_init__(self):
        self.distances = np.asarray(self.distances, dtype=float)
        self.visibility = np.asarray(self.visibility)
        self.constants = np.broadcast_to(np.asarray(self.constants, dtype=float), self.distances.shape)
        if np.any(self.distances < 0) or self.scale <= 0 or np.any(self.constants <= 0):
            raise ValueError("OksRecord needs d_i >= 0, s > 0, k_i > 0")


def oks(record: OksRecord) -> float:
    vis = record.visibility > 0
    if not vis.any():
        raise UndefinedOKSError("OKS undefined: no keypoint has v > 0")
    d, s, k = record.distances, record.scale, record.constants
    terms = np.exp(-(d**2) / (2.0 * s**2 * k**2))
    return float(terms[vis].sum() / vis.sum())


def keypoint_oks(pred_xy: np.ndarray, gt: np.ndarray, area: float, constants) -> float:
    """OKS between predicted (K, 2+) coordinates and a (K, 3) ground truth."""
    pred_xy = np.asarray(pred_xy, dtype=float)[:, :2]
    gt = np.asarray(gt, dtype=float)
    d = np.sqrt(((pred_xy - gt[:, :2]) ** 2).sum(axis=1))
    return oks(OksRecord(d, gt[:, 2], math.sqrt(max(area, np.finfo(float).tiny)), constants))


@dataclass
class GroundTruth:
    keypoints: np.ndarray  # (K, 3) x, y, v
    area: float

    @property
    def num_labelled(self) -> int:
        return int((np.asarray(self.keypoints)[:, 2] > 0).sum())


@dataclass
class Prediction:
    keypoints: np.ndarray  # (K, 3) x, y, score
    score: float


def oks_matrix(preds: Sequence[Prediction], gts: Sequence[GroundTruth], constants) -> np.ndarray:
    m = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            # unlabelled ground truths never match; evaluate() ignores them
            if g.num_labelled:
                m[i, j] = keypoint_oks(p.keypoints, g.keypoints, g.area, constants)
    return m


def match_instances(preds: Sequence[Prediction], gts: Sequence[GroundTruth], threshold: float,
                    constants=0.1, ious: np.ndarray | None = None) -> list[tuple[int, int | None]]:
    """Greedy matching in descending score order.

    Returns ``(pred_index, gt_index or None)`` pairs in processing order.  Every
    ground truth must have at least one labelled keypoint.
    """
    if ious is None:
        ious = oks_matrix(preds, gts, constants)
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    taken = set()
    out = []
    for i in order:
        best, best_oks = None, threshold
        for j in range(len(gts)):
            if j in taken:
                continue
            if ious[i, j] >= best_oks:
                best, best_oks = j, ious[i, j]
        if best is not None:
            taken.add(best)
        out.append((i, best))
    return out


@dataclass
class MetricReport:
    AP: float | None = None
    AP50: float | None = None
    AP75: float | None = None
    AP_M: float | None = None
    AP_L: float | None = None
    AR: float | None = None
    AR50: float | None = None
    AR75: float | None = None
    AR_M: float | None = None
    AR_L: float | None = None

    COLUMNS = ("AP", "AP50", "AP75", "AP_M", "AP_L", "AR", "AR50", "AR75", "AR_M", "AR_L")

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        head = " | ".join(f"{c:>6}" for c in self.COLUMNS)
        vals = " | ".join("   n/a" if getattr(self, c) is None else f"{getattr(self, c):6.3f}" for c in self.COLUMNS)
        return head + "\n" + vals


def _mean(xs: Iterable[float]) -> float:
    xs = list(xs)
    return math.fsum(xs) / len(xs)


def _evaluate_image(preds, gts, ious, area_rng, thresholds):
    """COCO per-image matching: returns dt scores, dt matched flags, dt ignore flags, n non-ignored gts."""
    gt_ignore = np.array([g.num_labelled == 0 or not (area_rng[0] <= g.area <= area_rng[1]) for g in gts], dtype=bool)
    gt_order = np.argsort(gt_ignore, kind="mergesort")
    dt_order = np.argsort([-p.score for p in preds], kind="mergesort")[:MAX_DETS]
    g_ign = gt_ignore[gt_order]
    nt, nd, ng = len(thresholds), len(dt_order), len(gt_order)
    matched = np.zeros((nt, nd), dtype=bool)
    dt_ign = np.zeros((nt, nd), dtype=bool)
    for ti, t in enumerate(thresholds):
        gt_taken = np.zeros(ng, dtype=bool)
        for di, d in enumerate(dt_order):
            best_t = min(t, 1 - 1e-10)
            m = -1
            for gi, g in enumerate(gt_order):
                if gt_taken[gi]:
                    continue
                # once matched to a real gt, stop before the ignored tail
                if m > -1 and not g_ign[m] and g_ign[gi]:
                    break
                if ious[d, g] < best_t:
                    continue
                best_t = ious[d, g]
                m = gi
            if m == -1:
                continue
            dt_ign[ti, di] = g_ign[m]
            matched[ti, di] = True
            gt_taken[m] = True
    # unmatched detections outside the area range are ignored
    for di, d in enumerate(dt_order):
        a = _pred_area(preds[d])
        out = not (area_rng[0] <= a <= area_rng[1])
        dt_ign[:, di] |= ~matched[:, di] & out
    scores = np.array([preds[d].score for d in dt_order])
    return scores, matched, dt_ign, int((~g_ign).sum())


def _pred_area(p: Prediction) -> float:
    xy = np.asarray(p.keypoints)[:, :2]
    w, h = xy.max(axis=0) - xy.min(axis=0)
    return float(w * h)


def average_precision(tps: np.ndarray, fps: np.ndarray, n_gt: int) -> tuple[float, float]:
    """101-point interpolated AP and final recall from score-sorted TP/FP flags."""
    if n_gt == 0:
        raise ValueError("no ground truth")
    tp = np.cumsum(tps, dtype=float)
    fp = np.cumsum(fps, dtype=float)
    if tp.size == 0:
        return 0.0, 0.0
    recall = tp / n_gt
    # a prefix made only of ignored detections has no precision; count it as 0
    precision = np.divide(tp, tp + fp, out=np.zeros_like(tp), where=(tp + fp) > 0)
    # precision envelope, right to left
    for i in range(precision.size - 1, 0, -1):
        if precision[i] > precision[i - 1]:
            precision[i - 1] = precision[i]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = [float(precision[i]) if i < precision.size else 0.0 for i in idx]
    return _mean(q), float(recall[-1])


def evaluate(
    predictions: dict,
    ground_truths: dict,
    thresholds: Sequence[float] = OKS_THRESHOLDS,
    constants=0.1,
    area_scale: float = 1.0,
) -> MetricReport:
    """AP/AR over all images.

    ``predictions`` and ``ground_truths`` map image id to lists of
    :class:`Prediction` / :class:`GroundTruth`.  Medium/large splits use the
    benchmark's 32^2 / 96^2 pixel-area bounds multiplied by ``area_scale``^2.
    """
    image_ids = sorted(ground_truths)
    if not any(g.num_labelled > 0 for i in image_ids for g in ground_truths[i]):
        return MetricReport()
    a2 = area_scale**2
    ranges = {
        "all": (0.0, 1e10),
        "M": (32**2 * a2, 96**2 * a2),
        "L": (96**2 * a2, 1e10),
    }
    ious = {i: oks_matrix(predictions.get(i, []), ground_truths[i], constants) for i in image_ids}
    ap_at = {}
    for name, rng in ranges.items():
        per_image = [_evaluate_image(predictions.get(i, []), ground_truths[i], ious[i], rng, thresholds)
                     for i in image_ids]
        n_gt = sum(r[3] for r in per_image)
        if n_gt == 0:
            ap_at[name] = None
            continue
        scores = np.concatenate([r[0] for r in per_image]) if per_image else np.zeros(0)
        order = np.argsort(-scores, kind="mergesort")
        aps, ars = [], []
        for ti in range(len(thresholds)):
            matched = np.concatenate([r[1][ti] for r in per_image])[order]
            ign = np.concatenate([r[2][ti] for r in per_image])[order]
            tps = matched & ~ign
            fps = ~matched & ~ign
            ap, ar = average_precision(tps, fps, n_gt)
            aps.append(ap)
            ars.append(ar)
        ap_at[name] = (aps, ars)

    rep = MetricReport()
    th = [round(t, 2) for t in thresholds]
    if ap_at["all"] is not None:
        aps, ars = ap_at["all"]
        rep.AP, rep.AR = _mean(aps), _mean(ars)
        if 0.5 in th:
            rep.AP50, rep.AR50 = aps[th.index(0.5)], ars[th.index(0.5)]
        if 0.75 in th:
            rep.AP75, rep.AR75 = aps[th.index(0.75)], ars[th.index(0.75)]
    if ap_at["M"] is not None:
        rep.AP_M, rep.AR_M = _mean(ap_at["M"][0]), _mean(ap_at["M"][1])
    if ap_at["L"] is not None:
        rep.AP_L, rep.AR_L = _mean(ap_at["L"][0]), _mean(ap_at["L"][1])
    return rep

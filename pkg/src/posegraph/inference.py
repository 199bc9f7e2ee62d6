"""Model inference over datasets: decoding, COCO-style results and evaluation."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .config import DecodeConfig, TTAConfig
from .metrics import GroundTruth, MetricReport, Prediction, evaluate
from .model import PoseNet
from .postprocess import FLIP_PAIRS_SYNTH, PoseInstance, decode, predict_maps
from .synth import Sample
from .trainer import PIXEL_MEAN


def model_forward(model: PoseNet):
    """Eval-mode forward closure on raw (N, 3, H, W) images in [0, 1]."""
    model.eval()

    def fwd(batch: np.ndarray):
        with T.no_grad():
            return model(T.Tensor(np.asarray(batch, dtype=float) - PIXEL_MEAN))

    return fwd


def infer_image(model: PoseNet, image: np.ndarray, decode_cfg: DecodeConfig, tta: TTAConfig | None = None,
                flip_pairs=FLIP_PAIRS_SYNTH) -> list[PoseInstance]:
    tta = tta or TTAConfig()
    stride = model.config.heatmap_stride
    heat, tags = predict_maps(model_forward(model), image, tta.flip, tta.scales, flip_pairs, stride)
    return decode(heat, tags, decode_cfg, stride)


def instance_to_result(image_id: int, inst: PoseInstance) -> dict:
    return {
        "image_id": int(image_id),
        "category_id": 1,
        "keypoints": [round(v, 6) for v in inst.keypoints_flat()],
        "score": round(inst.instance_score, 6),
    }


def results_to_predictions(results: Sequence[dict]) -> dict[int, list[Prediction]]:
    out: dict[int, list[Prediction]] = {}
    for r in results:
        kps = np.asarray(r["keypoints"], dtype=float).reshape(-1, 3)
        out.setdefault(int(r["image_id"]), []).append(Prediction(kps, float(r["score"])))
    return out


def ground_truths(samples: Sequence[Sample]) -> dict[int, list[GroundTruth]]:
    return {s.image_id: [GroundTruth(np.asarray(a.keypoints, dtype=float), a.area) for a in s.anns] for s in samples}


def evaluate_results(results: Sequence[dict], samples: Sequence[Sample], decode_cfg: DecodeConfig) -> MetricReport:
    return evaluate(results_to_predictions(results), ground_truths(samples),
                    constants=decode_cfg.keypoint_constant, area_scale=decode_cfg.area_scale)


def run_inference(model: PoseNet, samples: Sequence[Sample], decode_cfg: DecodeConfig,
                  tta: TTAConfig | None = None, flip_pairs=FLIP_PAIRS_SYNTH) -> list[dict]:
    """COCO keypoint results for every sample, in image order."""
    results = []
    for s in samples:
        for inst in infer_image(model, s.image, decode_cfg, tta, flip_pairs):
            results.append(instance_to_result(s.image_id, inst))
    return results


def evaluate_model(model: PoseNet, samples: Sequence[Sample], decode_cfg: DecodeConfig,
                   tta: TTAConfig | None = None) -> tuple[MetricReport, list[dict]]:
    results = run_inference(model, samples, decode_cfg, tta)
    return evaluate_results(results, samples, decode_cfg), results

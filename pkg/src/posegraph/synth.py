"""Synthetic multi-person stick-figure scenes, affine augmentation and dataset IO.

Keypoints: 0 head, 1 left hand, 2 right hand, 3 left foot, 4 right foot.
Figures face the camera, so a person's left side is on the image right.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import affine_transform

from .config import SCHEMA_VERSION, SceneSpec

KEYPOINT_NAMES = ["head", "left_hand", "right_hand", "left_foot", "right_foot"]
FLIP_PAIRS = ((1, 2), (3, 4))
SKELETON = [(0, 1), (0, 2), (0, 3), (0, 4)]  # drawn limbs for overlays (head to extremities)

# bone lengths at 64 px, scaled with image height and a per-person factor
_NECK = 6.0
_TORSO = 12.0
_ARM = 13.0
_LEG = 14.0
_HEAD_R = 3.0
_LIMB_W = 2.2
_JOINT_R = 1.8

_TRAIN_OFFSET = 0
_EVAL_OFFSET = 1_000_000


@dataclass
class Annotation:
    keypoints: np.ndarray  # (K, 3) x, y, v
    bbox: list = field(default_factory=list)  # x, y, w, h
    area: float = 0.0


def _segment_coverage(px, py, a, b, width):
    """Anti-aliased coverage of a thick segment from a to b."""
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    L2 = dx * dx + dy * dy
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / max(L2, 1e-12), 0.0, 1.0)
    dist = np.hypot(px - (ax + t * dx), py - (ay + t * dy))
    return np.clip(width / 2.0 + 0.5 - dist, 0.0, 1.0)


def _disk_coverage(px, py, c, r):
    return np.clip(r + 0.5 - np.hypot(px - c[0], py - c[1]), 0.0, 1.0)


def _skeleton(rng, spec: SceneSpec, unit: float):
    """Joint positions relative to the head, plus the drawn geometry."""
    f = rng.uniform(*spec.bone_scale) * unit
    neck = np.array([0.0, _NECK * f])
    hip = neck + np.array([rng.uniform(-1, 1) * f, _TORSO * f])
    a_l, a_r = np.radians(rng.uniform(*spec.arm_angle_range, size=2))
    g_l, g_r = np.radians(rng.uniform(*spec.leg_angle_range, size=2))
    arm_l, arm_r = _ARM * f * rng.uniform(0.85, 1.1, size=2)
    leg_l, leg_r = _LEG * f * rng.uniform(0.9, 1.1, size=2)
    head = np.zeros(2)
    lhand = neck + arm_l * np.array([math.cos(a_l), math.sin(a_l)])
    rhand = neck + arm_r * np.array([-math.cos(a_r), math.sin(a_r)])
    lfoot = hip + leg_l * np.array([math.sin(g_l), math.cos(g_l)])
    rfoot = hip + leg_r * np.array([-math.sin(g_r), math.cos(g_r)])
    kps = np.stack([head, lhand, rhand, lfoot, rfoot])
    segments = [(head, neck), (neck, hip), (neck, lhand), (neck, rhand), (hip, lfoot), (hip, rfoot)]
    return kps, segments, _HEAD_R * f, f


def _palette_color(rng, used):
    """Bright colour far (in RGB) from those already used."""
    best, best_d = None, -1.0
    for _ in range(12):
        c = rng.uniform(0.45, 1.0, size=3)
        c[rng.integers(3)] *= rng.uniform(0.2, 0.6)
        d = min((np.abs(c - u).sum() for u in used), default=3.0)
        if d > best_d:
            best, best_d = c, d
    return best


def generate_scene(spec: SceneSpec, index: int) -> tuple[np.ndarray, list[Annotation]]:
    """Render scene ``index``; output depends only on ``(spec.seed, index)`` and the spec."""
    rng = np.random.default_rng([spec.seed, index])
    w, h = spec.image_size
    unit = h / 64.0
    py, px = np.mgrid[0:h, 0:w] + 0.5
    bg = rng.uniform(0.05, 0.25)
    image = np.clip(bg + spec.noise_level * rng.standard_normal((3, h, w)), 0.0, 1.0)

    n = int(rng.integers(spec.persons_range[0], spec.persons_range[1] + 1))
    people = []
    centers: list[float] = []
    for _ in range(n):
        kps, segs, head_r, f = _skeleton(rng, spec, unit)
        margin = head_r + 1.0
        lo = -kps.min(axis=0) + margin
        hi = np.array([w, h]) - kps.max(axis=0) - margin
        hi = np.maximum(hi, lo)
        # spread people horizontally where possible
        for _ in range(30):
            off = rng.uniform(lo, hi)
            if all(abs(off[0] - c) >= 14.0 * unit for c in centers):
                break
        centers.append(float(off[0]))
        people.append((kps + off, [(a + off, b + off) for a, b in segs], head_r, off))

    used: list[np.ndarray] = []
    masks = []
    for kps, segs, head_r, _ in people:
        color = _palette_color(rng, used)
        used.append(color)
        cov = np.zeros((h, w))
        for a, b in segs:
            np.maximum(cov, _segment_coverage(px, py, a, b, _LIMB_W * unit), out=cov)
        np.maximum(cov, _disk_coverage(px, py, kps[0], head_r), out=cov)
        for p in kps[1:]:
            np.maximum(cov, _disk_coverage(px, py, p, _JOINT_R * unit), out=cov)
        image = image * (1.0 - cov) + color[:, None, None] * cov
        masks.append(cov)

    occluders = []
    if people and rng.uniform() < spec.occlusion_prob:
        kps, *_ = people[int(rng.integers(len(people)))]
        j = int(rng.integers(1, len(kps)))
        size = rng.uniform(5.0, 8.0) * unit
        cx, cy = kps[j] + rng.uniform(-1.5, 1.5, size=2)
        x0, y0 = cx - size / 2, cy - size / 2
        occ = ((px >= x0) & (px < x0 + size) & (py >= y0) & (py < y0 + size)).astype(float)
        shade = rng.uniform(0.0, 0.3)
        image = image * (1.0 - occ) + shade * occ
        occluders.append(occ)

    anns = []
    for i, (kps, segs, head_r, _) in enumerate(people):
        later = masks[i + 1:] + occluders
        out = np.zeros((len(kps), 3))
        for j, (x, y) in enumerate(kps):
            x = float(np.clip(x, 0.0, w - 1e-6))
            y = float(np.clip(y, 0.0, h - 1e-6))
            r, c = int(y), int(x)
            hidden = any(m[r, c] > 0.5 for m in later)
            out[j] = (x, y, 1.0 if hidden else 2.0)
        pts = np.concatenate([kps, np.array([[kps[0][0], kps[0][1] - head_r]])])
        x0, y0 = np.clip(pts.min(axis=0) - 1.0, 0, None)
        x1 = min(pts[:, 0].max() + 1.0, w)
        y1 = min(pts[:, 1].max() + 1.0, h)
        bbox = [float(x0), float(y0), float(x1 - x0), float(y1 - y0)]
        anns.append(Annotation(out, bbox, bbox[2] * bbox[3]))
    return image, anns


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AffineParams:
    rotation: float = 0.0  # degrees
    scale: float = 1.0
    tx: float = 0.0
    ty: float = 0.0
    flip: bool = False


@dataclass
class AugmentRanges:
    max_rotation: float = 30.0
    scale_range: tuple = (0.75, 1.5)
    max_translation: float = 40.0  # at 512 px; rescaled to the image width
    flip_prob: float = 0.5
    reference_width: float = 512.0


def sample_affine(rng: np.random.Generator, width: int, ranges: AugmentRanges | None = None) -> AffineParams:
    r = ranges or AugmentRanges()
    t = r.max_translation * width / r.reference_width
    return AffineParams(
        rotation=float(rng.uniform(-r.max_rotation, r.max_rotation)),
        scale=float(rng.uniform(*r.scale_range)),
        tx=float(rng.uniform(-t, t)),
        ty=float(rng.uniform(-t, t)),
        flip=bool(rng.uniform() < r.flip_prob),
    )


def affine_matrix(params: AffineParams, width: int, height: int) -> np.ndarray:
    """3x3 map from source to destination pixel coordinates (pixel i spans [i, i+1))."""
    cx, cy = width / 2.0, height / 2.0
    th = math.radians(params.rotation)
    c, s = math.cos(th), math.sin(th)
    lin = params.scale * np.array([[c, -s], [s, c]])
    m = np.eye(3)
    m[:2, :2] = lin
    m[:2, 2] = np.array([cx, cy]) + np.array([params.tx, params.ty]) - lin @ np.array([cx, cy])
    if params.flip:
        f = np.array([[-1.0, 0.0, width], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        m = f @ m
    return m


def _swap(kps: np.ndarray, pairs) -> np.ndarray:
    out = kps.copy()
    for a, b in pairs:
        out[[a, b]] = kps[[b, a]]
    return out


def warp_image(image: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Bilinear warp of a (C, H, W) image by the source->destination map ``m``."""
    if np.array_equal(m, np.eye(3)):
        return image.copy()
    inv = np.linalg.inv(m)
    # affine_transform works in (row, col) index space: idx = pixel - 0.5
    lin = inv[:2, :2][::-1, ::-1]
    t = inv[:2, 2][::-1]
    offset = lin @ np.array([0.5, 0.5]) + t - 0.5
    return np.stack([affine_transform(ch, lin, offset=offset, order=1, mode="constant", cval=0.0) for ch in image])


def augment(image: np.ndarray, anns: list[Annotation], params: AffineParams | None = None,
            rng: np.random.Generator | None = None, flip_pairs=FLIP_PAIRS,
            ranges: AugmentRanges | None = None) -> tuple[np.ndarray, list[Annotation]]:
    """Warp the image and keypoints with one affine map.

    If ``params`` is None they are drawn from ``rng``.  A flip also swaps the
    left/right keypoint labels; keypoints leaving the frame get ``v = 0``.
    """
    _, h, w = image.shape
    if params is None:
        params = sample_affine(rng, w, ranges)
    m = affine_matrix(params, w, h)
    out_img = warp_image(image, m)
    out_anns = []
    for ann in anns:
        kps = np.asarray(ann.keypoints, dtype=float)
        xy = kps[:, :2] @ m[:2, :2].T + m[:2, 2]
        new = np.concatenate([xy, kps[:, 2:3]], axis=1)
        if params.flip:
            new = _swap(new, flip_pairs)
        inside = (new[:, 0] >= 0) & (new[:, 0] < w) & (new[:, 1] >= 0) & (new[:, 1] < h)
        new[~inside, 2] = 0.0
        bx, by, bw, bh = ann.bbox if ann.bbox else (0.0, 0.0, 0.0, 0.0)
        corners = np.array([[bx, by], [bx + bw, by], [bx, by + bh], [bx + bw, by + bh]]) @ m[:2, :2].T + m[:2, 2]
        lo = np.clip(corners.min(axis=0), 0, [w, h])
        hi = np.clip(corners.max(axis=0), 0, [w, h])
        out_anns.append(Annotation(new, [float(lo[0]), float(lo[1]), float(hi[0] - lo[0]), float(hi[1] - lo[1])],
                                   float(ann.area * params.scale**2)))
    return out_img, out_anns


# ---------------------------------------------------------------------------
# COCO-schema dataset IO


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def categories() -> list[dict]:
    return [{
        "id": 1,
        "name": "person",
        "supercategory": "person",
        "keypoints": KEYPOINT_NAMES,
        "skeleton": [[a + 1, b + 1] for a, b in SKELETON],
    }]


def write_split(out_dir: Path, spec: SceneSpec, count: int, offset: int) -> dict:
    """Render ``count`` scenes into ``out_dir``; returns the annotation document."""
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    ann_id = 1
    w, h = spec.image_size
    for i in range(count):
        image, anns = generate_scene(spec, offset + i)
        image_id = i + 1
        name = f"{image_id:06d}.png"
        Image.fromarray(to_uint8(image)).save(img_dir / name)
        images.append({"id": image_id, "file_name": name, "width": w, "height": h})
        for a in anns:
            kps = a.keypoints
            annotations.append({
                "id": ann_id,
                "image_id": image_id,
                "category_id": 1,
                "keypoints": [round(float(v), 6) for v in kps.reshape(-1)],
                "num_keypoints": int((kps[:, 2] > 0).sum()),
                "bbox": [round(v, 6) for v in a.bbox],
                "area": round(float(a.area), 6),
                "iscrowd": 0,
            })
            ann_id += 1
    doc = {
        "schema_version": SCHEMA_VERSION,
        "info": {"description": "posegraph synthetic scenes", "seed": spec.seed, "index_offset": offset},
        "images": images,
        "annotations": annotations,
        "categories": categories(),
    }
    (out_dir / "annotations.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    return doc


@dataclass
class Sample:
    image_id: int
    image: np.ndarray  # (3, H, W) in [0, 1]
    anns: list


def load_annotations(path: Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise FileNotFoundError(f"cannot read annotations {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValueError(f"annotations {path} are not valid JSON: {exc}") from exc
    for key in ("images", "annotations"):
        if key not in doc:
            raise ValueError(f"annotations {path}: missing '{key}'")
    return doc


def annotations_by_image(doc: dict) -> dict[int, list[Annotation]]:
    """Person annotations grouped by image id (crowd regions dropped)."""
    person_ids = {c["id"] for c in doc.get("categories", []) if c.get("name") == "person"} or {1}
    out: dict[int, list[Annotation]] = {img["id"]: [] for img in doc["images"]}
    for a in doc["annotations"]:
        if a.get("iscrowd", 0) or a.get("category_id", 1) not in person_ids:
            continue
        kps = np.asarray(a["keypoints"], dtype=float).reshape(-1, 3)
        out.setdefault(a["image_id"], []).append(Annotation(kps, list(a.get("bbox", [])), float(a.get("area", 0.0))))
    return out


def load_dataset(data_dir: Path) -> list[Sample]:
    data_dir = Path(data_dir)
    ann_path = data_dir / "annotations.json"
    if not ann_path.exists():
        raise FileNotFoundError(f"annotations file not found: {ann_path}")
    doc = load_annotations(ann_path)
    by_image = annotations_by_image(doc)
    samples = []
    for img in sorted(doc["images"], key=lambda d: d["id"]):
        path = data_dir / "images" / img["file_name"]
        try:
            arr = np.asarray(Image.open(path).convert("RGB"), dtype=float) / 255.0
        except OSError as exc:
            raise FileNotFoundError(f"cannot read image {path}: {exc}") from exc
        samples.append(Sample(img["id"], arr.transpose(2, 0, 1), by_image.get(img["id"], [])))
    return samples


def make_samples(spec: SceneSpec, count: int, offset: int = _TRAIN_OFFSET, quantize: bool = True) -> list[Sample]:
    """In-memory equivalent of ``write_split`` + ``load_dataset``."""
    out = []
    for i in range(count):
        image, anns = generate_scene(spec, offset + i)
        if quantize:
            image = to_uint8(image).transpose(2, 0, 1) / 255.0
        out.append(Sample(i + 1, image, anns))
    return out

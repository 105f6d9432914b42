"""Detection ingest, confidence filtering, crop extraction and evaluation metrics."""
from __future__ import annotations

import hashlib
import json
import math
import os
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from .dataset import Annotation, BBox, DatasetManifest, ValidationError, parse_label_file

DEFAULT_CONFIDENCE = 0.25
DEFAULT_PAD = 0.05
MIN_CROP_PX = 8


class EvaluationError(ValueError):
    pass


class CropTooSmallError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: int
    bbox: BBox
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError("confidence", self.confidence)
        if self.class_id < 0:
            raise ValidationError("class_id", self.class_id)

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "class_id": self.class_id,
            "bbox": self.bbox.as_list(),
            "confidence": self.confidence,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Detection":
        return cls(str(d["image_id"]), int(d["class_id"]), BBox(*map(float, d["bbox"])), float(d["confidence"]))


def iou(a: BBox, b: BBox) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return min(1.0, inter / union)


def filter_by_confidence(dets: Iterable[Detection], threshold: float = DEFAULT_CONFIDENCE) -> list[Detection]:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"confidence threshold must be in [0, 1], got {threshold}")
    return [d for d in dets if d.confidence >= threshold]


# ---------------------------------------------------------------------------
# matching


@dataclass
class MatchSet:
    """Greedy matching outcome; indices refer to the input lists."""

    matches: list[tuple[int, int]]  # (detection index, truth index)
    false_positives: list[int]
    false_negatives: list[int]
    order: list[int]  # detection indices in processing order

    @property
    def tp(self) -> int:
        return len(self.matches)

    @property
    def fp(self) -> int:
        return len(self.false_positives)

    @property
    def fn(self) -> int:
        return len(self.false_negatives)

    def is_tp(self) -> dict[int, bool]:
        hit = {d for d, _ in self.matches}
        return {i: i in hit for i in self.order}


def confidence_order(confidences: Sequence[float]) -> list[int]:
    # sorted() is stable, so equal confidences keep input order
    return sorted(range(len(confidences)), key=lambda i: -confidences[i])


def match_greedy(
    dets: Sequence[Detection | Annotation],
    truths: Sequence[Annotation | BBox],
    iou_threshold: float = 0.5,
) -> MatchSet:
    """Match detections of one image and one class to ground truth.

    Highest-confidence detections claim first; each takes the still-free
    truth with the largest IoU at or above the threshold (lowest index on ties).
    """
    truth_boxes = [t.bbox if isinstance(t, Annotation) else t for t in truths]
    order = confidence_order([d.confidence for d in dets])
    used = [False] * len(truth_boxes)
    matches, fps = [], []
    for di in order:
        best, best_iou = -1, -1.0
        for ti, tb in enumerate(truth_boxes):
            if used[ti]:
                continue
            v = iou(dets[di].bbox, tb)
            if v >= iou_threshold and v > best_iou:
                best, best_iou = ti, v
        if best >= 0:
            used[best] = True
            matches.append((di, best))
        else:
            fps.append(di)
    fns = [ti for ti, u in enumerate(used) if not u]
    return MatchSet(matches, fps, fns, order)


# ---------------------------------------------------------------------------
# average precision


def ap_from_ranked(is_tp: Sequence[bool], n_truths: int) -> float:
    """All-point AP from detections already ranked by confidence."""
    if n_truths == 0:
        return 0.0
    flags = np.asarray(is_tp, dtype=bool)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_truths
    precision = tp / (tp + fp)
    # monotone non-increasing envelope, right to left
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate(([0.0], recall[:-1]))
    return float(np.sum((recall - prev) * envelope))


def _group_by_image(dets: Sequence[Detection]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = defaultdict(list)
    for i, d in enumerate(dets):
        groups[d.image_id].append(i)
    return groups


def _ranked_flags(
    dets: Sequence[Detection], truths: Mapping[str, Sequence[Annotation]], iou_threshold: float
) -> list[bool]:
    flags = [False] * len(dets)
    for image_id, idxs in _group_by_image(dets).items():
        ms = match_greedy([dets[i] for i in idxs], truths.get(image_id, ()), iou_threshold)
        for local, _ in ms.matches:
            flags[idxs[local]] = True
    return [flags[i] for i in confidence_order([d.confidence for d in dets])]


def average_precision(
    dets: Sequence[Detection],
    truths: Mapping[str, Sequence[Annotation]],
    iou_threshold: float = 0.5,
) -> float:
    """AP for one class. ``truths`` maps image id to that class's ground truth."""
    n_truths = sum(len(v) for v in truths.values())
    return ap_from_ranked(_ranked_flags(dets, truths, iou_threshold), n_truths)


# ---------------------------------------------------------------------------
# evaluate


@dataclass
class EvalResult:
    map50: float
    precision: float
    recall: float
    per_class_ap: dict[int, float]
    tp: int
    fp: int
    fn: int
    iou_threshold: float = 0.5
    operating_confidence: float = DEFAULT_CONFIDENCE

    @property
    def counts(self) -> tuple[int, int, int]:
        return (self.tp, self.fp, self.fn)

    def to_dict(self) -> dict:
        return {
            "map50": self.map50,
            "precision": self.precision,
            "recall": self.recall,
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "counts": {"tp": self.tp, "fp": self.fp, "fn": self.fn},
            "iou_threshold": self.iou_threshold,
            "operating_confidence": self.operating_confidence,
        }


def _image_class_counts(
    dets: Sequence[Detection], truths: Sequence[Annotation], iou_threshold: float
) -> dict[int, tuple[int, int, int]]:
    out = {}
    for c in sorted({d.class_id for d in dets} | {t.class_id for t in truths}):
        ms = match_greedy([d for d in dets if d.class_id == c], [t for t in truths if t.class_id == c], iou_threshold)
        out[c] = (ms.tp, ms.fp, ms.fn)
    return out


def evaluate(
    dets: Sequence[Detection],
    manifest: DatasetManifest,
    iou_threshold: float = 0.5,
    operating_confidence: float = DEFAULT_CONFIDENCE,
    workers: int = 1,
) -> EvalResult:
    """Score detections against a manifest's ground truth.

    mAP averages per-class AP over classes with at least one truth and uses
    every detection; precision and recall use only detections at or above
    ``operating_confidence``.
    """
    records = manifest.by_id()
    n_classes = len(manifest.class_names)
    if not any(r.annotations for r in manifest.records):
        raise EvaluationError("ground truth is empty; metrics are undefined")
    for d in dets:
        if d.class_id >= n_classes:
            raise EvaluationError(f"detection class {d.class_id} outside manifest class space ({n_classes} classes)")
        if d.image_id not in records:
            raise EvaluationError(f"detection references unknown image {d.image_id!r}")

    truth_by_class: dict[int, dict[str, list[Annotation]]] = defaultdict(dict)
    for r in manifest.records:
        for a in r.annotations:
            truth_by_class[a.class_id].setdefault(r.image_id, []).append(a)

    per_class_ap = {}
    for c in sorted(truth_by_class):
        per_class_ap[c] = average_precision([d for d in dets if d.class_id == c], truth_by_class[c], iou_threshold)
    map50 = float(np.mean(list(per_class_ap.values())))

    kept = filter_by_confidence(dets, operating_confidence)
    by_image = defaultdict(list)
    for d in kept:
        by_image[d.image_id].append(d)
    image_ids = [r.image_id for r in manifest.records]

    def work(image_id):
        return _image_class_counts(by_image.get(image_id, []), records[image_id].annotations, iou_threshold)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(work, image_ids))
    else:
        partials = [work(i) for i in image_ids]

    totals: dict[int, list[int]] = defaultdict(lambda: [0, 0, 0])
    for part in partials:
        for c, counts in part.items():
            for j in range(3):
                totals[c][j] += counts[j]
    tp = fp = fn = 0
    for c in sorted(totals):
        tp += totals[c][0]
        fp += totals[c][1]
        fn += totals[c][2]
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return EvalResult(map50, precision, recall, per_class_ap, tp, fp, fn, iou_threshold, operating_confidence)


# ---------------------------------------------------------------------------
# detections I/O


def load_detections(path: str | os.PathLike) -> list[Detection]:
    """Read detections from a JSON array or a directory of label files.

    In a directory, each ``<image_id>.txt`` must carry the confidence field.
    """
    path = Path(path)
    if path.is_dir():
        out = []
        for p in sorted(path.glob("*.txt")):
            for ann in parse_label_file(p.read_text(encoding="utf-8"), p.stem):
                if ann.confidence is None:
                    raise ValidationError("confidence", None, f"{p.name}: detection lines need a confidence field")
                out.append(Detection(p.stem, ann.class_id, ann.bbox, ann.confidence))
        return out
    doc = json.loads(path.read_text(encoding="utf-8"))
    if isinstance(doc, dict):
        doc = doc["detections"]
    return [Detection.from_dict(d) for d in doc]


def save_detections(dets: Sequence[Detection], path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps([d.to_dict() for d in dets], indent=1) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# crops


def crop_id_for(image_id: str, bbox: BBox) -> str:
    key = f"{image_id}|{bbox.cx:.6f}|{bbox.cy:.6f}|{bbox.w:.6f}|{bbox.h:.6f}"
    return hashlib.sha256(key.encode("utf-8")).hexdigest()[:16]


@dataclass
class Crop:
    detection: Detection
    pixels: np.ndarray  # (h, w, 3) uint8
    crop_id: str
    rect: tuple[int, int, int, int] = field(default=(0, 0, 0, 0))  # x0, y0, x1, y1 in source pixels

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] == 0 or self.pixels.shape[1] == 0:
            raise ValueError("crop pixel grid must be a non-empty (h, w, 3) array")


def crop_rect(
    dims: tuple[int, int], bbox: BBox, pad_fraction: float = DEFAULT_PAD
) -> tuple[int, int, int, int]:
    """Pixel rectangle ``(x0, y0, x1, y1)``, half-open, padded and clamped."""
    if pad_fraction < 0:
        raise ValueError("pad_fraction must be >= 0")
    width, height = dims
    x0, y0, x1, y1 = bbox.corners()
    px, py = bbox.w * pad_fraction, bbox.h * pad_fraction
    # round to 6 places first so 0.375 * 1920 style products land exactly
    left = math.floor(round((x0 - px) * width, 6))
    right = math.ceil(round((x1 + px) * width, 6))
    top = math.floor(round((y0 - py) * height, 6))
    bottom = math.ceil(round((y1 + py) * height, 6))
    left, right = max(0, left), min(width, right)
    top, bottom = max(0, top), min(height, bottom)
    return left, top, right, bottom


def extract_crop(
    image_pixels: np.ndarray,
    detection: Detection,
    pad_fraction: float = DEFAULT_PAD,
    min_size: int = MIN_CROP_PX,
) -> Crop:
    image_pixels = np.asarray(image_pixels)
    if image_pixels.ndim == 2:
        image_pixels = np.repeat(image_pixels[:, :, None], 3, axis=2)
    height, width = image_pixels.shape[:2]
    x0, y0, x1, y1 = crop_rect((width, height), detection.bbox, pad_fraction)
    if x1 - x0 < min_size or y1 - y0 < min_size:
        raise CropTooSmallError(
            f"crop {x1 - x0}x{y1 - y0} px for {detection.image_id} is below the {min_size}x{min_size} minimum"
        )
    pixels = np.ascontiguousarray(image_pixels[y0:y1, x0:x1, :3])
    return Crop(detection, pixels, crop_id_for(detection.image_id, detection.bbox), (x0, y0, x1, y1))


def load_image(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_crops(crops: Sequence[Crop], directory: str | os.PathLike) -> Path:
    """Write ``<crop_id>.png`` files plus an ``index.json`` sidecar; returns the index path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for c in crops:
        Image.fromarray(c.pixels).save(directory / f"{c.crop_id}.png", optimize=False)
        index.append({"crop_id": c.crop_id, "file": f"{c.crop_id}.png", "rect": list(c.rect), **c.detection.to_dict()})
    idx = directory / "index.json"
    idx.write_text(json.dumps(index, indent=1) + "\n", encoding="utf-8")
    return idx


def read_crops(directory: str | os.PathLike) -> list[Crop]:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text(encoding="utf-8"))
    return [
        Crop(Detection.from_dict(e), load_image(directory / e["file"]), e["crop_id"], tuple(e.get("rect", (0, 0, 0, 0))))
        for e in index
    ]

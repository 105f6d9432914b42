"""Detection dataset handling: label files, manifests, conversion, merge, split.

Labels use the normalized ``class cx cy w h [conf]`` line format, one file per
image. Manifests are immutable and serialise to a small JSON document.
"""
from __future__ import annotations

import csv
import json
import math
import os
import struct
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

SOURCES = ("deepfish", "ozfish", "other")
SPLITS = ("train", "val")
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp")
HIST_BINS = 50


class DatasetError(Exception):
    """Base class for dataset failures."""


class ValidationError(DatasetError, ValueError):
    def __init__(self, field_name: str, value, message: str | None = None):
        self.field = field_name
        self.value = value
        super().__init__(message or f"invalid {field_name}: {value!r}")


class LabelParseError(DatasetError, ValueError):
    def __init__(self, line_no: int, line: str, reason: str, image_id: str = ""):
        self.line_no = line_no
        self.line = line
        self.image_id = image_id
        where = f"{image_id}:" if image_id else "line "
        super().__init__(f"{where}{line_no}: {reason}: {line!r}")


class ConversionError(DatasetError):
    def __init__(self, orphan_ids: Sequence[str]):
        self.orphan_ids = list(orphan_ids)
        super().__init__("missing image dimensions for: " + ", ".join(self.orphan_ids))


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValidationError(name, v)
        if not 0.0 <= self.cx <= 1.0:
            raise ValidationError("cx", self.cx)
        if not 0.0 <= self.cy <= 1.0:
            raise ValidationError("cy", self.cy)
        if not 0.0 < self.w <= 1.0:
            raise ValidationError("w", self.w)
        if not 0.0 < self.h <= 1.0:
            raise ValidationError("h", self.h)
        if not (self.cx - self.w / 2 < 1.0 and self.cx + self.w / 2 > 0.0):
            raise ValidationError("cx", self.cx, "box does not intersect the unit square in x")
        if not (self.cy - self.h / 2 < 1.0 and self.cy + self.h / 2 > 0.0):
            raise ValidationError("cy", self.cy, "box does not intersect the unit square in y")

    def corners(self) -> tuple[float, float, float, float]:
        """Return ``(x_min, y_min, x_max, y_max)`` in normalized units."""
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def as_list(self) -> list[float]:
        return [self.cx, self.cy, self.w, self.h]


@dataclass(frozen=True)
class Annotation:
    class_id: int
    bbox: BBox
    confidence: float | None = None

    def __post_init__(self):
        if isinstance(self.class_id, bool) or not isinstance(self.class_id, int) or self.class_id < 0:
            raise ValidationError("class_id", self.class_id)
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise ValidationError("confidence", self.confidence)


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    path: str
    width_px: int
    height_px: int
    annotations: tuple[Annotation, ...] = ()
    source: str = "other"

    def __post_init__(self):
        if self.width_px <= 0:
            raise ValidationError("width_px", self.width_px)
        if self.height_px <= 0:
            raise ValidationError("height_px", self.height_px)
        if self.source not in SOURCES:
            raise ValidationError("source", self.source)
        object.__setattr__(self, "annotations", tuple(self.annotations))


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ImageRecord, ...] = ()
    class_names: tuple[str, ...] = ()
    split: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.split is not None and self.split not in SPLITS:
            raise ValidationError("split", self.split)
        seen = set()
        n_classes = len(self.class_names)
        for rec in self.records:
            if rec.image_id in seen:
                raise ValidationError("image_id", rec.image_id, f"duplicate image_id {rec.image_id!r}")
            seen.add(rec.image_id)
            for ann in rec.annotations:
                if ann.class_id >= n_classes:
                    raise ValidationError(
                        "class_id", ann.class_id,
                        f"class_id {ann.class_id} in {rec.image_id!r} has no entry in class_names",
                    )

    def __len__(self) -> int:
        return len(self.records)

    @property
    def instance_count(self) -> int:
        return sum(len(r.annotations) for r in self.records)

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.image_id: r for r in self.records}


# ---------------------------------------------------------------------------
# label files


def parse_label_file(text: str, image_id: str = "") -> list[Annotation]:
    """Parse one label file into annotations, in file order.

    Blank lines are skipped. A sixth field, when present, is the confidence.
    """
    out = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (5, 6):
            raise LabelParseError(line_no, raw, f"expected 5 or 6 fields, got {len(parts)}", image_id)
        try:
            class_f = float(parts[0])
            values = [float(p) for p in parts[1:]]
        except ValueError:
            raise LabelParseError(line_no, raw, "non-numeric field", image_id) from None
        if not class_f.is_integer():
            raise LabelParseError(line_no, raw, "class id is not an integer", image_id)
        try:
            bbox = BBox(*values[:4])
            ann = Annotation(int(class_f), bbox, values[4] if len(values) == 5 else None)
        except ValidationError as exc:
            exc.args = (f"{image_id or 'line'} {line_no}: {exc}",)
            raise
        out.append(ann)
    return out


def write_label_file(annotations: Iterable[Annotation]) -> str:
    lines = []
    for a in annotations:
        b = a.bbox
        line = f"{a.class_id} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}"
        if a.confidence is not None:
            line += f" {a.confidence:.6f}"
        lines.append(line + "\n")
    return "".join(lines)


# ---------------------------------------------------------------------------
# pixel-space table conversion


@dataclass(frozen=True)
class ColumnMapping:
    """Which keys of a bbox table row hold which values.

    ``collapse_to`` maps every label onto one class name (single-class
    detection); ``None`` keeps the labels as found.
    """

    image_id: str = "image_id"
    label: str = "label"
    x_min: str = "x_min"
    y_min: str = "y_min"
    x_max: str = "x_max"
    y_max: str = "y_max"
    collapse_to: str | None = None


@dataclass
class ConversionResult:
    annotations: dict[str, list[Annotation]]
    class_names: list[str]
    rejects: list[tuple[int, str]] = field(default_factory=list)  # (row index, reason)


def convert_bbox_table(
    rows: Sequence[Mapping[str, object]],
    column_map: ColumnMapping,
    image_dims: Mapping[str, tuple[int, int]],
    class_names: Sequence[str] = (),
) -> ConversionResult:
    """Convert corner-form pixel boxes into normalized annotations grouped by image."""
    cm = column_map
    orphans = sorted({str(r[cm.image_id]) for r in rows} - set(image_dims))
    if orphans:
        raise ConversionError(orphans)

    names = list(class_names)
    index = {n: i for i, n in enumerate(names)}
    out: dict[str, list[Annotation]] = {}
    rejects = []
    for i, row in enumerate(rows):
        image_id = str(row[cm.image_id])
        try:
            x0, y0, x1, y1 = (float(row[k]) for k in (cm.x_min, cm.y_min, cm.x_max, cm.y_max))
        except (TypeError, ValueError):
            rejects.append((i, "non-numeric box coordinate"))
            continue
        if x1 <= x0:
            rejects.append((i, f"x_max {x1} <= x_min {x0}"))
            continue
        if y1 <= y0:
            rejects.append((i, f"y_max {y1} <= y_min {y0}"))
            continue
        w_px, h_px = image_dims[image_id]
        try:
            bbox = BBox(
                (x0 + x1) / (2 * w_px),
                (y0 + y1) / (2 * h_px),
                (x1 - x0) / w_px,
                (y1 - y0) / h_px,
            )
        except ValidationError as exc:
            rejects.append((i, str(exc)))
            continue
        label = cm.collapse_to if cm.collapse_to is not None else str(row[cm.label])
        if label not in index:
            index[label] = len(names)
            names.append(label)
        out.setdefault(image_id, []).append(Annotation(index[label], bbox))
    return ConversionResult(out, names, rejects)


def read_bbox_csv(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# merge / split


def merge_manifests(manifests: Sequence[DatasetManifest]) -> DatasetManifest:
    """Union several manifests into one.

    Class names are unioned in first-seen order and annotation ids remapped.
    An image id present in more than one input is prefixed with its record's
    source name (``"ozfish:frame_001"``) in every input that carries it.
    """
    names: list[str] = []
    index: dict[str, int] = {}
    for m in manifests:
        for n in m.class_names:
            if n not in index:
                index[n] = len(names)
                names.append(n)

    id_counts = Counter(r.image_id for m in manifests for r in m.records)
    used: set[str] = set()
    records = []
    for mi, m in enumerate(manifests):
        remap = [index[n] for n in m.class_names]
        for r in m.records:
            new_id = r.image_id
            if id_counts[r.image_id] > 1:
                new_id = f"{r.source}:{r.image_id}"
                if new_id in used:
                    new_id = f"{r.source}-{mi}:{r.image_id}"
            used.add(new_id)
            anns = tuple(replace(a, class_id=remap[a.class_id]) for a in r.annotations)
            records.append(replace(r, image_id=new_id, annotations=anns))
    return DatasetManifest(tuple(records), tuple(names), None)


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def split_manifest(
    manifest: DatasetManifest, train_fraction: float = 0.85, seed: int = 0
) -> tuple[DatasetManifest, DatasetManifest]:
    n = len(manifest.records)
    if n < 2:
        raise DatasetError(f"cannot split a manifest with {n} record(s)")
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError("train_fraction", train_fraction)
    n_train = round_half_away(train_fraction * n)
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = np.sort(perm[:n_train])
    val_idx = np.sort(perm[n_train:])
    recs = manifest.records
    train = DatasetManifest(tuple(recs[i] for i in train_idx), manifest.class_names, "train")
    val = DatasetManifest(tuple(recs[i] for i in val_idx), manifest.class_names, "val")
    return train, val


# ---------------------------------------------------------------------------
# stats


@dataclass
class DatasetStats:
    image_count: int
    instance_count: int
    per_class: dict[int, int]
    class_names: list[str]
    histograms: dict[str, list[int]]
    bin_edges: list[float]

    def to_dict(self) -> dict:
        return {
            "image_count": self.image_count,
            "instance_count": self.instance_count,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "per_class_name": {
                (self.class_names[k] if k < len(self.class_names) else str(k)): v
                for k, v in self.per_class.items()
            },
            "histograms": self.histograms,
            "bin_edges": self.bin_edges,
        }


def dataset_stats(manifest: DatasetManifest) -> DatasetStats:
    anns = [a for r in manifest.records for a in r.annotations]
    per_class = dict(sorted(Counter(a.class_id for a in anns).items()))
    edges = np.linspace(0.0, 1.0, HIST_BINS + 1)
    hists = {}
    for i, name in enumerate(("cx", "cy", "w", "h")):
        vals = np.array([a.bbox.as_list()[i] for a in anns], dtype=float)
        counts, _ = np.histogram(vals, bins=edges)
        hists[name] = counts.astype(int).tolist()
    return DatasetStats(
        image_count=len(manifest.records),
        instance_count=len(anns),
        per_class=per_class,
        class_names=list(manifest.class_names),
        histograms=hists,
        bin_edges=edges.tolist(),
    )


# ---------------------------------------------------------------------------
# integrity scan


@dataclass(frozen=True)
class IntegrityIssue:
    kind: str  # corrupt-image | orphan-label | missing-label | bad-label
    path: str
    detail: str = ""


@dataclass
class IntegrityReport:
    root: str
    image_count: int
    label_count: int
    issues: list[IntegrityIssue]

    @property
    def ok(self) -> bool:
        return not self.issues

    def to_dict(self) -> dict:
        return {
            "root": self.root,
            "image_count": self.image_count,
            "label_count": self.label_count,
            "issues": [vars(i) for i in self.issues],
        }


def _png_problem(data: bytes) -> str | None:
    if not data.startswith(b"\x89PNG\r\n\x1a\n"):
        return "bad PNG signature"
    pos = 8
    first = True
    while pos + 8 <= len(data):
        length, ctype = struct.unpack(">I4s", data[pos:pos + 8])
        if first and ctype != b"IHDR":
            return "first chunk is not IHDR"
        first = False
        end = pos + 12 + length
        if end > len(data):
            return f"truncated {ctype.decode('latin-1')} chunk"
        if ctype == b"IEND":
            return None
        pos = end
    return "missing IEND chunk"


def _jpeg_problem(data: bytes) -> str | None:
    if not data.startswith(b"\xff\xd8"):
        return "bad JPEG SOI marker"
    if not data.rstrip(b"\x00").endswith(b"\xff\xd9"):
        return "missing JPEG EOI marker (truncated)"
    return None


def image_problem(path: Path) -> str | None:
    """Return a description of what is wrong with an image file, or None."""
    try:
        data = path.read_bytes()
    except OSError as exc:
        return f"unreadable: {exc}"
    suffix = path.suffix.lower()
    if suffix == ".png":
        return _png_problem(data)
    if suffix in (".jpg", ".jpeg"):
        return _jpeg_problem(data)
    try:
        with Image.open(path) as im:
            im.verify()
    except Exception as exc:  # PIL raises a wide range here
        return f"unreadable header: {exc}"
    return None


def _pair_key(rel: Path) -> tuple[str, ...]:
    parts = ["*" if p in ("images", "labels") else p for p in rel.parts[:-1]]
    return (*parts, rel.stem)


def scan_integrity(root: str | os.PathLike, workers: int = 4) -> IntegrityReport:
    """Check a dataset directory for corrupt images and unpaired label files.

    Images and labels pair up by stem, with ``images/`` and ``labels/``
    directory components treated as equivalent.
    """
    root = Path(root)
    if not root.is_dir():
        raise OSError(f"dataset root is not a readable directory: {root}")
    images, labels = {}, {}
    for p in sorted(root.rglob("*")):
        if not p.is_file():
            continue
        rel = p.relative_to(root)
        if p.suffix.lower() in IMAGE_SUFFIXES:
            images[_pair_key(rel)] = p
        elif p.suffix.lower() == ".txt":
            labels[_pair_key(rel)] = p

    issues = []
    img_paths = list(images.values())
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        problems = list(pool.map(image_problem, img_paths))
    for p, prob in zip(img_paths, problems):
        if prob:
            issues.append(IntegrityIssue("corrupt-image", str(p.relative_to(root)), prob))
    for key, p in images.items():
        if key not in labels:
            issues.append(IntegrityIssue("missing-label", str(p.relative_to(root))))
    for key, p in labels.items():
        rel = str(p.relative_to(root))
        if key not in images:
            issues.append(IntegrityIssue("orphan-label", rel))
        try:
            parse_label_file(p.read_text(encoding="utf-8"), rel)
        except (DatasetError, UnicodeDecodeError) as exc:
            issues.append(IntegrityIssue("bad-label", rel, str(exc)))
    issues.sort(key=lambda i: (i.path, i.kind))
    return IntegrityReport(str(root), len(images), len(labels), issues)


# ---------------------------------------------------------------------------
# manifest files


def manifest_to_dict(manifest: DatasetManifest) -> dict:
    doc = {
        "class_names": list(manifest.class_names),
        "records": [
            {
                "image_id": r.image_id,
                "path": r.path,
                "width_px": r.width_px,
                "height_px": r.height_px,
                "source": r.source,
                "annotations": [
                    {"class_id": a.class_id, "bbox": a.bbox.as_list()}
                    | ({"confidence": a.confidence} if a.confidence is not None else {})
                    for a in r.annotations
                ],
            }
            for r in manifest.records
        ],
    }
    if manifest.split is not None:
        doc["split"] = manifest.split
    return doc


def manifest_from_dict(doc: Mapping) -> DatasetManifest:
    records = []
    for r in doc.get("records", []):
        anns = tuple(
            Annotation(int(a["class_id"]), BBox(*map(float, a["bbox"])), a.get("confidence"))
            for a in r.get("annotations", [])
        )
        records.append(
            ImageRecord(
                image_id=str(r["image_id"]),
                path=str(r.get("path", "")),
                width_px=int(r["width_px"]),
                height_px=int(r["height_px"]),
                annotations=anns,
                source=r.get("source", "other"),
            )
        )
    return DatasetManifest(tuple(records), tuple(doc.get("class_names", [])), doc.get("split"))


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(manifest_to_dict(manifest), indent=1) + "\n", encoding="utf-8")


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    return manifest_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_manifest_from_dir(
    root: str | os.PathLike, class_names: Sequence[str] = ("fish",), source: str = "other"
) -> DatasetManifest:
    """Collect image/label pairs under ``root`` into a manifest.

    Image sizes come from the file headers; images without a label file get
    no annotations. Image ids are the paths relative to ``root`` without suffix
    and without ``images/`` components.
    """
    root = Path(root)
    labels = {
        _pair_key(p.relative_to(root)): p for p in sorted(root.rglob("*.txt")) if p.is_file()
    }
    records = []
    for p in sorted(root.rglob("*")):
        if not p.is_file() or p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        rel = p.relative_to(root)
        with Image.open(p) as im:
            w, h = im.size
        lab = labels.get(_pair_key(rel))
        image_id = "/".join(part for part in rel.with_suffix("").parts if part not in ("images", "labels"))
        anns = parse_label_file(lab.read_text(encoding="utf-8"), image_id) if lab else []
        records.append(ImageRecord(image_id, str(p), w, h, tuple(anns), source))
    return DatasetManifest(tuple(records), tuple(class_names))

"""Crop feature vectors: a built-in histogram embedder and an exchange format for
vectors produced by external networks."""
from __future__ import annotations

import csv
import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .detect import Crop

RESAMPLE = 64
GRID = 4
HUE_BINS = 8
ORIENT_BINS = 8
BASELINE_DIM = GRID * GRID * (HUE_BINS + ORIENT_BINS)
BASELINE_TAG = "baseline-hue-grad-256"
NORM_EPS = 1e-12


class VectorFormatError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureVector:
    crop_id: str
    values: np.ndarray


@dataclass(frozen=True)
class FeatureMatrix:
    ids: tuple[str, ...]
    data: np.ndarray
    embedder_tag: str = ""

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise VectorFormatError(f"feature data must be 2-D, got shape {data.shape}")
        ids = tuple(self.ids)
        if len(ids) != data.shape[0]:
            raise VectorFormatError(f"{len(ids)} ids for {data.shape[0]} rows")
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise VectorFormatError(f"duplicate crop ids: {', '.join(dup[:5])}")
        if not np.all(np.isfinite(data)):
            raise VectorFormatError("feature matrix contains non-finite values")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "data", data)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def row(self, crop_id: str) -> FeatureVector:
        return FeatureVector(crop_id, self.data[self.ids.index(crop_id)])


# ---------------------------------------------------------------------------
# baseline embedder


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel sample centres and edge clamping."""
    img = np.asarray(img, dtype=np.float64)
    in_h, in_w = img.shape[:2]

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(in_h, out_h)
    x0, x1, fx = axis(in_w, out_w)
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy[:, None, None]) + bot * fy[:, None, None]


def rgb_to_hue(rgb: np.ndarray) -> np.ndarray:
    """Hue in [0, 1) for an (..., 3) array; achromatic pixels get hue 0."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    delta = mx - rgb.min(axis=-1)
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(
        mx == r, ((g - b) / safe) % 6.0,
        np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    )
    h = np.where(delta > 0, h / 6.0, 0.0)
    return h % 1.0


def _l2(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n >= NORM_EPS else np.zeros_like(v)


def embed_pixels(pixels: np.ndarray) -> np.ndarray:
    """256-dim descriptor of an RGB pixel grid.

    Each of the 4x4 cells of the 64x64 resample contributes an 8-bin hue
    histogram and an 8-bin unsigned gradient-orientation histogram weighted by
    magnitude; the two sub-blocks are L2-normalized separately.
    """
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        pixels = np.repeat(pixels[:, :, None], 3, axis=2)
    img = resize_bilinear(pixels[:, :, :3], RESAMPLE, RESAMPLE) / 255.0

    hue_bin = np.minimum((rgb_to_hue(img) * HUE_BINS).astype(int), HUE_BINS - 1)
    lum = img @ np.array([0.299, 0.587, 0.114])
    gy, gx = np.gradient(lum)
    mag = np.hypot(gx, gy)
    theta = np.arctan2(gy, gx) % np.pi
    # bins centred on multiples of 22.5 degrees
    orient_bin = np.floor(theta / (np.pi / ORIENT_BINS) + 0.5).astype(int) % ORIENT_BINS

    cell = RESAMPLE // GRID
    out = np.empty(BASELINE_DIM)
    pos = 0
    for gi in range(GRID):
        for gj in range(GRID):
            sl = (slice(gi * cell, (gi + 1) * cell), slice(gj * cell, (gj + 1) * cell))
            hue_hist = np.bincount(hue_bin[sl].ravel(), minlength=HUE_BINS).astype(float)
            grad_hist = np.bincount(orient_bin[sl].ravel(), weights=mag[sl].ravel(), minlength=ORIENT_BINS)
            out[pos:pos + HUE_BINS] = _l2(hue_hist)
            out[pos + HUE_BINS:pos + HUE_BINS + ORIENT_BINS] = _l2(grad_hist)
            pos += HUE_BINS + ORIENT_BINS
    return out


def embed_baseline(crop: Crop) -> FeatureVector:
    if crop.pixels.shape[0] < 8 or crop.pixels.shape[1] < 8:
        raise ValueError(f"crop {crop.crop_id} is smaller than 8x8 px")
    return FeatureVector(crop.crop_id, embed_pixels(crop.pixels))


embed_baseline.tag = BASELINE_TAG  # type: ignore[attr-defined]


def build_feature_matrix(
    crops: Sequence[Crop],
    embedder: Callable[[Crop], FeatureVector] = embed_baseline,
    workers: int = 1,
    tag: str | None = None,
) -> FeatureMatrix:
    if not crops:
        raise ValueError("at least one crop is required")
    ids = [c.crop_id for c in crops]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"duplicate crop ids: {', '.join(dup[:5])}")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            vecs = list(pool.map(embedder, crops))
    else:
        vecs = [embedder(c) for c in crops]
    data = np.vstack([np.asarray(v.values, dtype=np.float64) for v in vecs])
    return FeatureMatrix(tuple(ids), data, tag or getattr(embedder, "tag", getattr(embedder, "__name__", "custom")))


# ---------------------------------------------------------------------------
# vector exchange files
#
# binary: one JSON header line {"dim", "count", "embedder_tag"}, then per row a
# u16 LE id length, the UTF-8 id, and dim float32 LE values.
# csv: header "id,v0,...,v{dim-1}".


def write_vectors(matrix: FeatureMatrix, path: str | os.PathLike, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix.lower() == ".csv" else "bin")
    if fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["id"] + [f"v{j}" for j in range(matrix.dim)])
            for cid, row in zip(matrix.ids, matrix.data):
                w.writerow([cid] + [repr(float(v)) for v in row])
        return
    header = {"dim": matrix.dim, "count": matrix.n, "embedder_tag": matrix.embedder_tag}
    chunks = [json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"]
    block = matrix.data.astype("<f4")
    for cid, row in zip(matrix.ids, block):
        raw = cid.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw + row.tobytes())
    path.write_bytes(b"".join(chunks))


def load_external_vectors(path: str | os.PathLike, embedder_tag: str | None = None) -> FeatureMatrix:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _load_csv(path, embedder_tag)
    data = path.read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise VectorFormatError(f"{path}: missing header line")
    try:
        header = json.loads(data[:nl])
        dim, count = int(header["dim"]), int(header["count"])
    except (ValueError, KeyError, TypeError) as exc:
        raise VectorFormatError(f"{path}: bad header: {exc}") from None
    if count < 1:
        raise VectorFormatError(f"{path}: no rows")
    pos = nl + 1
    ids, rows = [], []
    for r in range(count):
        if pos + 2 > len(data):
            raise VectorFormatError(f"{path}: truncated at row {r}")
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        cid = data[pos:pos + ln].decode("utf-8")
        pos += ln
        end = pos + 4 * dim
        if end > len(data):
            raise VectorFormatError(f"{path}: row {r} ({cid}) shorter than dim {dim}")
        rows.append(np.frombuffer(data, dtype="<f4", count=dim, offset=pos))
        ids.append(cid)
        pos = end
    if pos != len(data):
        raise VectorFormatError(f"{path}: {len(data) - pos} trailing bytes; row width disagrees with dim {dim}")
    _check_dupes(path, ids)
    return FeatureMatrix(tuple(ids), np.vstack(rows).astype(np.float64), embedder_tag or header.get("embedder_tag", ""))


def _check_dupes(path, ids):
    seen = set()
    for i in ids:
        if i in seen:
            raise VectorFormatError(f"{path}: duplicate id {i!r}")
        seen.add(i)


def _load_csv(path: Path, embedder_tag: str | None) -> FeatureMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        ids, rows = [], []
        for line_no, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if header and len(rec) != len(header):
                raise VectorFormatError(f"{path}:{line_no}: expected {len(header) - 1} values, got {len(rec) - 1}")
            ids.append(rec[0])
            rows.append([float(v) for v in rec[1:]])
    if not rows:
        raise VectorFormatError(f"{path}: no rows")
    _check_dupes(path, ids)
    return FeatureMatrix(tuple(ids), np.array(rows, dtype=np.float64), embedder_tag or "external-csv")

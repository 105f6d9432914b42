"""Geographic tagging of detections, simulated survey tracks, and map output
(GeoJSON plus a single-file HTML/SVG map)."""
from __future__ import annotations

import html
import json
import math
import os
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .detect import Detection

EPOCH = datetime(2025, 1, 1, tzinfo=timezone.utc)
PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
    "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939", "#8c6d31", "#843c39",
)


class GeoError(ValueError):
    pass


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float
    timestamp: datetime
    depth_m: float | None = None

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise GeoError(f"latitude out of range: {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise GeoError(f"longitude out of range: {self.lon}")
        if self.depth_m is not None and self.depth_m < 0:
            raise GeoError(f"depth must be non-negative: {self.depth_m}")
        if self.timestamp.tzinfo is None:
            raise GeoError("timestamp must be timezone-aware (UTC)")


@dataclass(frozen=True)
class Region:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    name: str = ""

    def __post_init__(self):
        if not (-90.0 <= self.lat_min < self.lat_max <= 90.0):
            raise GeoError(f"invalid latitude bounds {self.lat_min}..{self.lat_max}")
        if not (-180.0 <= self.lon_min < self.lon_max <= 180.0):
            raise GeoError(f"invalid longitude bounds {self.lon_min}..{self.lon_max}")

    def contains(self, lat: float, lon: float) -> bool:
        return self.lat_min <= lat <= self.lat_max and self.lon_min <= lon <= self.lon_max


@dataclass(frozen=True)
class DetectionEvent:
    detection: Detection
    location: GeoPoint | None = None
    crop_id: str | None = None
    summary: str | None = None
    cluster_label: int | None = None
    class_name: str | None = None

    def to_dict(self) -> dict:
        loc = self.location
        return {
            "detection": self.detection.to_dict(),
            "location": None if loc is None else {
                "lat": loc.lat, "lon": loc.lon, "timestamp": iso(loc.timestamp), "depth_m": loc.depth_m,
            },
            "crop_id": self.crop_id,
            "summary": self.summary,
            "cluster_label": self.cluster_label,
            "class_name": self.class_name,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DetectionEvent":
        loc = d.get("location")
        point = None
        if loc:
            point = GeoPoint(loc["lat"], loc["lon"], datetime.fromisoformat(loc["timestamp"].replace("Z", "+00:00")), loc.get("depth_m"))
        return cls(Detection.from_dict(d["detection"]), point, d.get("crop_id"), d.get("summary"), d.get("cluster_label"), d.get("class_name"))


def iso(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


# ---------------------------------------------------------------------------
# regions


def load_gazetteer(path: str | os.PathLike | None = None) -> dict[str, Region]:
    if path is None:
        text = resources.files("auvsurvey").joinpath("data/regions.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return {name: Region(name=name, **bounds) for name, bounds in json.loads(text).items()}


def get_region(name: str, gazetteer: Mapping[str, Region] | None = None) -> Region:
    gaz = gazetteer if gazetteer is not None else load_gazetteer()
    try:
        return gaz[name]
    except KeyError:
        raise GeoError(f"unknown region {name!r}; known: {', '.join(sorted(gaz))}") from None


# ---------------------------------------------------------------------------
# tracks


def simulate_track(
    region: Region, n_points: int, seed: int = 0, start: datetime = EPOCH, margin: float = 0.05
) -> list[GeoPoint]:
    """Lawnmower survey path sampled at equal arc length, one point per second.

    The seed picks the number of east-west transects (3-8) and the starting
    corner. All points lie inside ``region`` shrunk by ``margin`` per side.
    """
    if n_points < 1:
        raise GeoError("n_points must be >= 1")
    rng = np.random.default_rng(seed)
    n_lines = int(rng.integers(3, 9))
    corner = int(rng.integers(4))
    dlat = (region.lat_max - region.lat_min) * margin
    dlon = (region.lon_max - region.lon_min) * margin
    lats = np.linspace(region.lat_min + dlat, region.lat_max - dlat, n_lines)
    west, east = region.lon_min + dlon, region.lon_max - dlon
    if corner & 1:
        lats = lats[::-1]
    ends = (west, east) if corner & 2 == 0 else (east, west)

    verts = []
    for i, lat in enumerate(lats):
        a, b = ends if i % 2 == 0 else ends[::-1]
        verts.append((lat, a))
        verts.append((lat, b))
    verts = np.array(verts)
    seg = np.hypot(*np.diff(verts, axis=0).T)
    cum = np.concatenate(([0.0], np.cumsum(seg)))
    targets = np.linspace(0.0, cum[-1], n_points) if n_points > 1 else np.zeros(1)
    lat = np.interp(targets, cum, verts[:, 0])
    lon = np.interp(targets, cum, verts[:, 1])
    return [
        GeoPoint(float(la), float(lo), start + timedelta(seconds=i))
        for i, (la, lo) in enumerate(zip(lat, lon))
    ]


def attach_locations(
    detections: Sequence[Detection],
    track: Sequence[GeoPoint],
    crop_ids: Sequence[str] | None = None,
    class_names: Sequence[str] = (),
) -> list[DetectionEvent]:
    """Spread detections uniformly over the track: detection i -> point i*T//N."""
    if not detections or not track:
        raise GeoError("attach_locations needs at least one detection and one track point")
    n, t = len(detections), len(track)
    out = []
    for i, det in enumerate(detections):
        name = class_names[det.class_id] if det.class_id < len(class_names) else None
        out.append(DetectionEvent(det, track[i * t // n], crop_ids[i] if crop_ids else None, class_name=name))
    return out


# ---------------------------------------------------------------------------
# GeoJSON


def _feature(ev: DetectionEvent) -> dict:
    if ev.location is None:
        raise GeoError(f"event for crop {ev.crop_id} has no location")
    loc = ev.location
    return {
        "type": "Feature",
        "geometry": {"type": "Point", "coordinates": [loc.lon, loc.lat]},
        "properties": {
            "image_id": ev.detection.image_id,
            "class_id": ev.detection.class_id,
            "class_name": ev.class_name,
            "confidence": ev.detection.confidence,
            "crop_id": ev.crop_id,
            "cluster_label": ev.cluster_label,
            "summary": ev.summary,
            "timestamp": iso(loc.timestamp),
            "depth_m": loc.depth_m,
        },
    }


def emit_geojson(events: Sequence[DetectionEvent]) -> str:
    doc = {"type": "FeatureCollection", "features": [_feature(e) for e in events]}
    return json.dumps(doc, indent=1) + "\n"


# ---------------------------------------------------------------------------
# HTML map

_MAP_W, _MAP_H, _PAD = 760, 460, 30

_PAGE = """<!DOCTYPE html>
<html lang="en">
<head>
<meta charset="utf-8">
<title>{title}</title>
<style>
body {{ font-family: sans-serif; margin: 16px; background: #f4f7fa; color: #123; }}
.pane {{ background: #fff; border: 1px solid #ccd; margin-bottom: 16px; padding: 8px; display: inline-block; }}
svg {{ display: block; }}
.marker {{ stroke: #fff; stroke-width: 1.5; }}
.marker:hover, .scatter-point:hover {{ stroke: #000; stroke-width: 2; }}
.empty {{ color: #667; font-style: italic; }}
</style>
</head>
<body>
<h1>{title}</h1>
<div class="pane" id="map-pane">
<h2>Detection locations</h2>
{map_body}
</div>
{scatter}
</body>
</html>
"""


def _color(label) -> str:
    if label is None:
        return "#0b6e99"
    return PALETTE[int(label) % len(PALETTE)]


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _bounds(values: Sequence[float], min_span: float) -> tuple[float, float]:
    lo, hi = min(values), max(values)
    span = max(hi - lo, min_span)
    mid = (lo + hi) / 2
    return mid - span * 0.55, mid + span * 0.55


def _map_svg(events: Sequence[DetectionEvent]) -> str:
    if not events:
        return '<p class="empty">No detections to display.</p>'
    lats = [e.location.lat for e in events]
    lons = [e.location.lon for e in events]
    lat0, lat1 = _bounds(lats, 0.01)
    lon0, lon1 = _bounds(lons, 0.01)
    # equirectangular: keep one degree of longitude = cos(mid-lat) degrees of latitude
    k = math.cos(math.radians((lat0 + lat1) / 2))
    sx = (_MAP_W - 2 * _PAD) / ((lon1 - lon0) * k)
    sy = (_MAP_H - 2 * _PAD) / (lat1 - lat0)
    s = min(sx, sy)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_MAP_W}" height="{_MAP_H}" viewBox="0 0 {_MAP_W} {_MAP_H}">',
        f'<rect x="0" y="0" width="{_MAP_W}" height="{_MAP_H}" fill="#d8ecf7"/>',
        f'<text x="{_PAD}" y="{_MAP_H - 8}" font-size="11">lon {lon0:.3f}..{lon1:.3f}, lat {lat0:.3f}..{lat1:.3f}</text>',
    ]
    for e in events:
        x = _PAD + (e.location.lon - lon0) * k * s
        y = _MAP_H - _PAD - (e.location.lat - lat0) * s
        tip = [
            f"class: {e.class_name or e.detection.class_id}",
            f"confidence: {e.detection.confidence:.3f}",
            f"lat {e.location.lat:.5f}, lon {e.location.lon:.5f}",
        ]
        if e.cluster_label is not None:
            tip.append(f"cluster: {e.cluster_label}")
        if e.summary:
            tip.append(f"summary: {e.summary}")
        parts.append(
            f'<circle class="marker" cx="{_fmt(x)}" cy="{_fmt(y)}" r="6" fill="{_color(e.cluster_label)}" '
            f'data-crop="{html.escape(e.crop_id or "", quote=True)}">'
            f"<title>{html.escape(chr(10).join(tip))}</title></circle>"
        )
    parts.append("</svg>")
    return "\n".join(parts)


def _scatter_svg(coords, labels, ids=None) -> str:
    xy = np.asarray(coords, dtype=float)[:, :2]
    w, h, pad = 520, 420, 24
    x0, x1 = _bounds(xy[:, 0].tolist(), 1e-9)
    y0, y1 = _bounds(xy[:, 1].tolist(), 1e-9)
    parts = [
        '<div class="pane" id="scatter-pane">',
        "<h2>Cluster scatter (first two principal components)</h2>",
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect x="0" y="0" width="{w}" height="{h}" fill="#fafafa"/>',
    ]
    for i, ((x, y), lab) in enumerate(zip(xy, labels)):
        px = pad + (x - x0) / (x1 - x0) * (w - 2 * pad)
        py = h - pad - (y - y0) / (y1 - y0) * (h - 2 * pad)
        name = ids[i] if ids is not None else str(i)
        parts.append(
            f'<circle class="scatter-point" cx="{_fmt(px)}" cy="{_fmt(py)}" r="4" fill="{_color(lab)}">'
            f"<title>{html.escape(f'{name}: cluster {int(lab)}')}</title></circle>"
        )
    parts.append("</svg>")
    parts.append("</div>")
    return "\n".join(parts)


def emit_map_html(
    events: Sequence[DetectionEvent],
    cluster_scatter: tuple[Sequence[Sequence[float]], Sequence[int]] | None = None,
    scatter_ids: Sequence[str] | None = None,
    title: str = "Survey detections",
) -> str:
    """Self-contained HTML page; no scripts, stylesheets or tiles are fetched."""
    for e in events:
        if e.location is None:
            raise GeoError(f"event for crop {e.crop_id} has no location")
    scatter = ""
    if cluster_scatter is not None and len(cluster_scatter[1]):
        scatter = _scatter_svg(cluster_scatter[0], cluster_scatter[1], scatter_ids)
    return _PAGE.format(title=html.escape(title), map_body=_map_svg(events), scatter=scatter)


def save_events(events: Sequence[DetectionEvent], path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps([e.to_dict() for e in events], indent=1) + "\n", encoding="utf-8")


def load_events(path: str | os.PathLike) -> list[DetectionEvent]:
    return [DetectionEvent.from_dict(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]

"""End-to-end pipeline over a data repository.

Stages: filter -> crops -> features -> pca -> cluster -> geo -> reports -> map.
Each stage is keyed by a digest of its settings and upstream outputs; a stage
whose record and outputs already exist is reused instead of recomputed.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import cluster as kmeans_mod
from .config import PipelineConfig
from .dataset import IMAGE_SUFFIXES, BBox, load_manifest
from .detect import (
    CropTooSmallError,
    Detection,
    EvalResult,
    crop_id_for,
    evaluate,
    extract_crop,
    filter_by_confidence,
    load_detections,
    load_image,
    read_crops,
    save_detections,
    write_crops,
)
from .embed import BASELINE_TAG, FeatureMatrix, build_feature_matrix, embed_pixels, load_external_vectors, write_vectors
from .geo import (
    EPOCH,
    DetectionEvent,
    GeoPoint,
    attach_locations,
    emit_geojson,
    emit_map_html,
    get_region,
    load_events,
    load_gazetteer,
    save_events,
    simulate_track,
)
from .reduce import fit_pca, load_pca, project_for_viz, save_pca, transform
from .report import (
    LLMClient,
    ReportCache,
    build_cluster_prompt,
    build_detection_prompt,
    cluster_stats,
)
from .repository import Repository, StageRecord, digest_json, sha256_file, write_atomic

log = logging.getLogger(__name__)

_FULL_BOX = BBox(0.5, 0.5, 1.0, 1.0)


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


class PredictError(RuntimeError):
    pass


@dataclass
class RunResult:
    run_id: str
    manifest_path: Path
    stages: list[StageRecord]
    artifacts: dict[str, Path] = field(default_factory=dict)

    @property
    def all_cached(self) -> bool:
        return all(s.cache_hit for s in self.stages)


def find_image(images_dir: Path, image_id: str) -> Path:
    for suffix in IMAGE_SUFFIXES + tuple(s.upper() for s in IMAGE_SUFFIXES):
        p = images_dir / f"{image_id}{suffix}"
        if p.exists():
            return p
    raise FileNotFoundError(f"no image for {image_id!r} under {images_dir}")


class _Runner:
    def __init__(self, repo: Repository):
        self.repo = repo
        self.records: list[StageRecord] = []

    def stage(self, name: str, material: dict, build: Callable[[str], Sequence[Path]]) -> StageRecord:
        key = digest_json({"stage": name, **material})[:20]
        rec = self.repo.cached_stage(name, key)
        if rec is None:
            try:
                files = build(key)
            except Exception as exc:
                raise PipelineError(name, exc) from exc
            rec = self.repo.record_stage(name, key, files)
            log.info("stage %-10s computed  %s", name, key)
        else:
            log.info("stage %-10s cache hit %s", name, key)
        self.records.append(rec)
        return rec


def _input_digests(cfg: PipelineConfig, dets: Sequence[Detection]) -> dict:
    d: dict = {}
    if cfg.detections:
        p = Path(cfg.detections)
        if p.is_dir():
            d["detections"] = digest_json({f.name: sha256_file(f) for f in sorted(p.glob("*.txt"))})
        else:
            d["detections"] = sha256_file(p)
    if cfg.vectors:
        d["vectors"] = sha256_file(cfg.vectors)
    elif cfg.images:
        images = Path(cfg.images)
        d["images"] = digest_json({i: sha256_file(find_image(images, i)) for i in sorted({x.image_id for x in dets})})
    return d


def run_pipeline(cfg: PipelineConfig) -> RunResult:
    """Execute every stage, writing artifacts and a run manifest under the repository."""
    cfg.validate()
    if not cfg.detections:
        raise PipelineError("inputs", ValueError("a detections file or directory is required"))
    if not cfg.vectors and not cfg.images:
        raise PipelineError("inputs", ValueError("either an images directory or an external vectors file is required"))
    repo = Repository(cfg.repository_root).init()
    lock = repo.lock()
    try:
        return _run_locked(cfg, repo)
    finally:
        lock.release()


def _run_locked(cfg: PipelineConfig, repo: Repository) -> RunResult:
    started = time.perf_counter()
    try:
        all_dets = load_detections(cfg.detections)
        inputs = _input_digests(cfg, all_dets)
    except Exception as exc:
        raise PipelineError("inputs", exc) from exc
    run_id = digest_json({"config": cfg.digest_material(), "inputs": inputs})[:16]
    run_dir = repo.runs / run_id
    runner = _Runner(repo)
    artifacts: dict[str, Path] = {}

    def write_manifest(status: str, failed: str | None = None, error: str | None = None):
        doc = {
            "run_id": run_id,
            "status": status,
            "seed": cfg.seed,
            "config": cfg.to_dict(),
            "inputs": inputs,
            "stages": [r.to_dict() for r in runner.records],
        }
        if failed:
            doc["failed_stage"] = failed
            doc["error"] = error
        write_atomic(run_dir / "manifest.json", json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n")

    try:
        _stages(cfg, repo, runner, all_dets, inputs, artifacts)
    except PipelineError as exc:
        for r in runner.records:
            r.stale = True
        write_manifest("failed", exc.stage, str(exc.cause))
        raise
    write_manifest("ok")
    pointer = {k: repo.rel(v) for k, v in sorted(artifacts.items())}
    pointer["run_id"] = run_id
    write_atomic(repo.models / "latest.json", json.dumps(pointer, indent=1, sort_keys=True) + "\n")
    log.info("run %s finished in %.2fs", run_id, time.perf_counter() - started)
    return RunResult(run_id, run_dir / "manifest.json", runner.records, artifacts)


def _stages(cfg, repo, runner, all_dets, inputs, artifacts):
    # 1. confidence filter
    def build_filter(key):
        kept = filter_by_confidence(all_dets, cfg.confidence_threshold)
        if not kept:
            raise ValueError(f"no detections at or above confidence {cfg.confidence_threshold}")
        out = repo.detections / f"filtered-{key}.json"
        save_detections(kept, out)
        return [out]

    r_filter = runner.stage("filter", {"detections": inputs.get("detections"), "threshold": cfg.confidence_threshold}, build_filter)
    det_path = repo.root / next(iter(r_filter.outputs))
    dets = load_detections(det_path)
    artifacts["detections"] = det_path

    # 2. crops and 3. features
    crop_dir = None
    if cfg.vectors:
        def build_features(key):
            ext = load_external_vectors(cfg.vectors)
            index = {cid: i for i, cid in enumerate(ext.ids)}
            ids, rows = [], []
            for d in dets:
                cid = crop_id_for(d.image_id, d.bbox)
                if cid not in index:
                    raise ValueError(f"external vectors lack crop {cid} ({d.image_id})")
                if cid not in ids:
                    ids.append(cid)
                    rows.append(ext.data[index[cid]])
            out = repo.features / f"{key}.vec"
            write_vectors(FeatureMatrix(tuple(ids), np.vstack(rows), ext.embedder_tag), out)
            return [out]

        r_feat = runner.stage("features", {"vectors": inputs["vectors"], "detections": r_filter.digest}, build_features)
    else:
        images = Path(cfg.images)

        def build_crops(key):
            out_dir = repo.crops / key
            crops, rejected, seen = [], [], set()
            cache: dict[str, np.ndarray] = {}
            for d in dets:
                cid = crop_id_for(d.image_id, d.bbox)
                if cid in seen:
                    rejected.append({"crop_id": cid, "image_id": d.image_id, "reason": "duplicate box"})
                    continue
                if d.image_id not in cache:
                    cache = {d.image_id: load_image(find_image(images, d.image_id))}
                try:
                    crops.append(extract_crop(cache[d.image_id], d, cfg.pad_fraction))
                    seen.add(cid)
                except CropTooSmallError as exc:
                    rejected.append({"crop_id": cid, "image_id": d.image_id, "reason": str(exc)})
            if not crops:
                raise ValueError("no usable crops")
            idx = write_crops(crops, out_dir)
            rej = out_dir / "rejected.json"
            rej.write_text(json.dumps(rejected, indent=1) + "\n", encoding="utf-8")
            return [idx, rej] + [out_dir / f"{c.crop_id}.png" for c in crops]

        r_crops = runner.stage(
            "crops",
            {"detections": r_filter.digest, "images": inputs["images"], "pad": cfg.pad_fraction},
            build_crops,
        )
        crop_dir = repo.crops / r_crops.key

        def build_features(key):
            fm = build_feature_matrix(read_crops(crop_dir), workers=cfg.workers)
            out = repo.features / f"{key}.vec"
            write_vectors(fm, out)
            return [out]

        r_feat = runner.stage("features", {"crops": r_crops.digest, "embedder": BASELINE_TAG}, build_features)

    feat_path = repo.features / f"{r_feat.key}.vec"
    features = load_external_vectors(feat_path)
    artifacts["features"] = feat_path
    if features.n < 3:
        raise PipelineError("features", ValueError(f"need at least 3 crops to cluster, got {features.n}"))

    # 4. PCA
    def build_pca(key):
        out = repo.models / f"pca-{key}.pca"
        save_pca(fit_pca(features, cfg.selection_rule()), out)
        return [out]

    r_pca = runner.stage("pca", {"features": r_feat.digest, "rule": cfg.pca_rule}, build_pca)
    pca_path = repo.models / f"pca-{r_pca.key}.pca"
    # downstream stages use the persisted (float32) model so predict reproduces them
    pca = load_pca(pca_path)
    reduced = transform(pca, features)
    artifacts["pca"] = pca_path

    # 5. clustering
    k_min, k_max = (cfg.k, cfg.k) if cfg.k else (cfg.k_min, cfg.k_max)

    def build_cluster(key):
        model = kmeans_mod.scan_k(reduced, k_min, k_max, cfg.restarts, cfg.seed, workers=cfg.workers)
        # snap to the persisted float32 centroids so labels agree with predict()
        tmp = repo.models / f"cluster-{key}.kmeans"
        kmeans_mod.save_cluster_model(model, tmp)
        stored = kmeans_mod.load_cluster_model(tmp)
        labels, dist = kmeans_mod.predict(stored, reduced)
        inertia = float(np.sum(dist ** 2))
        model = replace(model, centroids=stored.centroids, labels=labels, inertia=inertia)
        kmeans_mod.save_cluster_model(model, tmp)
        assign = repo.models / f"assignments-{key}.csv"
        kmeans_mod.write_assignments(assign, features.ids, labels, dist)
        return [tmp, assign]

    r_cluster = runner.stage(
        "cluster",
        {"pca": r_pca.digest, "features": r_feat.digest, "k_min": k_min, "k_max": k_max,
         "restarts": cfg.restarts, "seed": cfg.seed},
        build_cluster,
    )
    cl_path = repo.models / f"cluster-{r_cluster.key}.kmeans"
    model = kmeans_mod.load_cluster_model(cl_path)
    artifacts["cluster"] = cl_path
    artifacts["assignments"] = repo.models / f"assignments-{r_cluster.key}.csv"
    _, distances = kmeans_mod.predict(model, reduced)

    # 6. geo tagging
    id_to_det = {}
    for d in dets:
        id_to_det.setdefault(crop_id_for(d.image_id, d.bbox), d)
    ordered_dets = [id_to_det[cid] for cid in features.ids]

    def build_geo(key):
        region = get_region(cfg.region_name, load_gazetteer(cfg.gazetteer))
        n_track = cfg.track_points or len(ordered_dets)
        track = simulate_track(region, n_track, cfg.seed)
        events = attach_locations(ordered_dets, track, list(features.ids), cfg.class_names)
        events = [
            DetectionEvent(e.detection, e.location, e.crop_id, None, int(lab), e.class_name)
            for e, lab in zip(events, model.labels)
        ]
        out = repo.maps / f"events-{key}.json"
        save_events(events, out)
        return [out]

    r_geo = runner.stage(
        "geo",
        {"features": r_feat.digest, "cluster": r_cluster.digest, "region": cfg.region_name,
         "gazetteer": sha256_file(cfg.gazetteer) if cfg.gazetteer else None,
         "track_points": cfg.track_points, "seed": cfg.seed, "class_names": cfg.class_names},
        build_geo,
    )
    events = load_events(repo.maps / f"events-{r_geo.key}.json")

    # 7. summaries
    def build_reports(key):
        client = LLMClient(cfg.llm, ReportCache(repo.reports))
        jobs = []
        for e in events:
            png = crop_dir / f"{e.crop_id}.png" if crop_dir else None
            jobs.append({
                "prompt": build_detection_prompt(e),
                "attachment": png.read_bytes() if png is not None and png.exists() else None,
                "subject_id": e.crop_id,
                "prompt_id": "detection_analysis",
            })
        if cfg.cluster_summary:
            stats = cluster_stats(model.labels, features.ids, distances, model.k)
            jobs.append({"prompt": build_cluster_prompt(model, stats), "subject_id": f"clusters-{r_cluster.key}",
                         "prompt_id": "cluster_analysis"})
        try:
            reports = client.summarize_many(jobs)
        finally:
            client.close()
        index = {
            "detections": {r.subject_id: r.cache_key for r in reports if r.prompt_id == "detection_analysis"},
            "clusters": [r.cache_key for r in reports if r.prompt_id == "cluster_analysis"],
        }
        out = repo.reports / "index" / f"{key}.json"
        write_atomic(out, json.dumps(index, indent=1, sort_keys=True) + "\n")
        return [out] + [repo.reports / f"{r.cache_key}.json" for r in reports]

    r_reports = runner.stage(
        "reports",
        {"events": r_geo.digest, "crops": r_crops.digest if crop_dir else None,
         "model_tag": cfg.llm.model_tag, "base_url": cfg.llm.base_url, "cluster_summary": cfg.cluster_summary},
        build_reports,
    )
    report_index = json.loads((repo.reports / "index" / f"{r_reports.key}.json").read_text(encoding="utf-8"))
    cache = ReportCache(repo.reports)
    summaries = {}
    for cid, key in report_index["detections"].items():
        rep = cache.get(key)
        summaries[cid] = rep.response_text if rep else None
    artifacts["report_index"] = repo.reports / "index" / f"{r_reports.key}.json"

    # 8. map artifacts
    def build_map(key):
        final = [
            DetectionEvent(e.detection, e.location, e.crop_id, summaries.get(e.crop_id), e.cluster_label, e.class_name)
            for e in events
        ]
        gj = repo.maps / f"{key}.geojson"
        write_atomic(gj, emit_geojson(final))
        coords = project_for_viz(reduced, 2)
        page = repo.maps / f"{key}.html"
        write_atomic(page, emit_map_html(final, (coords, model.labels.tolist()), list(features.ids)))
        ev = repo.maps / f"events-final-{key}.json"
        save_events(final, ev)
        return [gj, page, ev]

    r_map = runner.stage("map", {"events": r_geo.digest, "reports": r_reports.digest, "pca": r_pca.digest}, build_map)
    artifacts["geojson"] = repo.maps / f"{r_map.key}.geojson"
    artifacts["html"] = repo.maps / f"{r_map.key}.html"
    artifacts["events"] = repo.maps / f"events-final-{r_map.key}.json"


# ---------------------------------------------------------------------------
# predict


@dataclass
class PredictResult:
    ids: list[str]
    labels: np.ndarray
    distances: np.ndarray
    assignments: Path
    geojson: Path | None = None
    html: Path | None = None
    reports: list = field(default_factory=list)


def _latest(repo: Repository) -> dict:
    p = repo.models / "latest.json"
    if not p.exists():
        return {}
    return json.loads(p.read_text(encoding="utf-8"))


def _read_locations(path: Path) -> dict[str, tuple[float, float]]:
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        return {r["crop_id"]: (float(r["lat"]), float(r["lon"])) for r in csv.DictReader(fh)}


def predict_crops(
    repo_root: str | Path,
    vectors: str | Path | None = None,
    crops_dir: str | Path | None = None,
    pca_path: str | Path | None = None,
    cluster_path: str | Path | None = None,
    locations: str | Path | None = None,
    llm_client: LLMClient | None = None,
) -> PredictResult:
    """Assign new crops (image files or external vectors) to fitted clusters."""
    repo = Repository(repo_root).init()
    latest = _latest(repo)
    if pca_path is None and "pca" in latest:
        pca_path = repo.root / latest["pca"]
    if cluster_path is None and "cluster" in latest:
        cluster_path = repo.root / latest["cluster"]
    if not pca_path or not Path(pca_path).exists() or not cluster_path or not Path(cluster_path).exists():
        raise PredictError(
            "fitted PCA and cluster models not found; run `auvsurvey run` first or pass --pca-model and --cluster-model"
        )
    pca = load_pca(pca_path)
    model = kmeans_mod.load_cluster_model(cluster_path)

    images: dict[str, Path] = {}
    if vectors:
        fm = load_external_vectors(vectors)
    elif crops_dir:
        files = sorted(p for p in Path(crops_dir).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise PredictError(f"no crop images found in {crops_dir}")
        images = {p.stem: p for p in files}
        fm = FeatureMatrix(tuple(images), np.vstack([embed_pixels(load_image(p)) for p in files]), BASELINE_TAG)
    else:
        raise PredictError("either vectors or a crops directory is required")
    if fm.dim != pca.dim:
        raise PredictError(f"feature width {fm.dim} does not match the fitted model; expected dimension {pca.dim}")

    labels, dist = kmeans_mod.predict(model, transform(pca, fm))
    tag = digest_json({"ids": list(fm.ids), "data": sha256_file(vectors) if vectors else
                       {k: sha256_file(v) for k, v in images.items()},
                       "pca": sha256_file(pca_path), "cluster": sha256_file(cluster_path),
                       "locations": sha256_file(locations) if locations else None})[:16]
    out_dir = repo.predictions / tag
    out_dir.mkdir(parents=True, exist_ok=True)
    assign = out_dir / "assignments.csv"
    kmeans_mod.write_assignments(assign, fm.ids, labels, dist)
    result = PredictResult(list(fm.ids), labels, dist, assign)

    new_events = []
    if locations:
        locs = _read_locations(Path(locations))
        for i, cid in enumerate(fm.ids):
            if cid not in locs:
                continue
            lat, lon = locs[cid]
            det = Detection(cid, 0, _FULL_BOX, 1.0)
            new_events.append(DetectionEvent(det, GeoPoint(lat, lon, EPOCH), cid, None, int(labels[i])))

    if llm_client is not None:
        for i, cid in enumerate(fm.ids):
            ev = next((e for e in new_events if e.crop_id == cid), None) or DetectionEvent(
                Detection(cid, 0, _FULL_BOX, 1.0), None, cid, None, int(labels[i]))
            png = images.get(cid)
            rep = llm_client.summarize(build_detection_prompt(ev), png.read_bytes() if png else None, cid)
            result.reports.append(rep)
        texts = {r.subject_id: r.response_text for r in result.reports}
        new_events = [DetectionEvent(e.detection, e.location, e.crop_id, texts.get(e.crop_id), e.cluster_label) for e in new_events]

    if new_events:
        base = load_events(repo.root / latest["events"]) if "events" in latest else []
        all_events = base + new_events
        result.geojson = out_dir / "map.geojson"
        result.html = out_dir / "map.html"
        write_atomic(result.geojson, emit_geojson(all_events))
        write_atomic(result.html, emit_map_html(all_events, title="Survey detections with predicted crops"))
    return result


# ---------------------------------------------------------------------------
# eval


def evaluate_files(
    repo_root: str | Path,
    detections: str | Path,
    manifest: str | Path,
    iou_threshold: float = 0.5,
    operating_confidence: float = 0.25,
) -> tuple[EvalResult, Path]:
    repo = Repository(repo_root).init()
    dets = load_detections(detections)
    man = load_manifest(manifest)
    result = evaluate(dets, man, iou_threshold, operating_confidence)
    src = Path(detections)
    det_digest = sha256_file(src) if src.is_file() else digest_json(
        {f.name: sha256_file(f) for f in sorted(src.glob("*.txt"))})
    tag = digest_json({"detections": det_digest, "manifest": sha256_file(manifest),
                       "iou": iou_threshold, "conf": operating_confidence})[:16]
    out = repo.detections / f"eval-{tag}.json"
    write_atomic(out, json.dumps(result.to_dict(), indent=1, sort_keys=True) + "\n")
    return result, out

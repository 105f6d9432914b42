"""Command-line entry point: ``auvsurvey <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from PIL import Image

from . import dataset as ds
from .config import ConfigError, load_config
from .detect import EvaluationError
from .pipeline import PipelineError, PredictError, evaluate_files, find_image, predict_crops, run_pipeline
from .report import LLMClient, ReportCache
from .repository import Repository, RepositoryBusy, digest_json, write_atomic

log = logging.getLogger("auvsurvey")


def _global_options(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--repo", default=default, help="data repository root (default: ./repository)")
    parser.add_argument("--config", default=default, help="YAML config file")
    parser.add_argument("--seed", type=int, default=default, help="seed for stochastic stages")
    parser.add_argument("--mock-llm", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="use the deterministic offline LLM stand-in")
    parser.add_argument("--json", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="machine-readable output")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="auvsurvey", description="Post-detection analysis of underwater survey imagery.")
    _global_options(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    # dataset
    p_ds = sub.add_parser("dataset", parents=[common], help="dataset tooling")
    ds_sub = p_ds.add_subparsers(dest="action", required=True)

    p = ds_sub.add_parser("merge", parents=[common], help="merge manifests")
    p.add_argument("manifests", nargs="+")
    p.add_argument("--name", default="merged")

    p = ds_sub.add_parser("split", parents=[common], help="train/val split")
    p.add_argument("manifest")
    p.add_argument("--fraction", type=float, default=0.85)

    p = ds_sub.add_parser("stats", parents=[common], help="instance and box statistics")
    p.add_argument("manifest")

    p = ds_sub.add_parser("check", parents=[common], help="scan a dataset directory for corrupt or unpaired files")
    p.add_argument("root")
    p.add_argument("--workers", type=int, default=4)

    p = ds_sub.add_parser("build", parents=[common], help="manifest from an images/labels directory")
    p.add_argument("root")
    p.add_argument("--source", default="other", choices=ds.SOURCES)
    p.add_argument("--classes", default="fish", help="comma-separated class names")
    p.add_argument("--name", default=None)

    p = ds_sub.add_parser("convert", parents=[common], help="pixel-box CSV to manifest and label files")
    p.add_argument("csv")
    p.add_argument("--images", help="directory used to read image sizes")
    p.add_argument("--width", type=int, default=1920)
    p.add_argument("--height", type=int, default=1080)
    p.add_argument("--source", default="ozfish", choices=ds.SOURCES)
    p.add_argument("--single-class", default="fish", help="collapse labels to this class ('' keeps labels)")
    p.add_argument("--name", default=None)
    for col in ("image_id", "label", "x_min", "y_min", "x_max", "y_max"):
        p.add_argument(f"--col-{col.replace('_', '-')}", dest=f"col_{col}", default=col)

    # run
    p = sub.add_parser("run", parents=[common], help="run the full pipeline")
    p.add_argument("--detections")
    p.add_argument("--images")
    p.add_argument("--vectors")
    p.add_argument("--confidence", type=float, dest="confidence_threshold")
    p.add_argument("--pad", type=float, dest="pad_fraction")
    p.add_argument("--pca", dest="pca_rule", help="variance threshold (0.98) or component count (900)")
    p.add_argument("--k", type=int)
    p.add_argument("--k-min", type=int)
    p.add_argument("--k-max", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--region", dest="region_name")
    p.add_argument("--track-points", type=int)
    p.add_argument("--cluster-summary", action="store_true", default=None)
    p.add_argument("--workers", type=int)

    # predict
    p = sub.add_parser("predict", parents=[common], help="assign new crops to fitted clusters")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--vectors")
    src.add_argument("--crops")
    p.add_argument("--pca-model")
    p.add_argument("--cluster-model")
    p.add_argument("--locations", help="CSV with crop_id,lat,lon")
    p.add_argument("--summarize", action="store_true")

    # eval
    p = sub.add_parser("eval", parents=[common], help="detection metrics against ground truth")
    p.add_argument("--detections", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--confidence", type=float, default=0.25)
    return parser


def _emit(args, payload: dict, text: str) -> None:
    print(json.dumps(payload, indent=1, sort_keys=True) if args.json else text)


def _repo_root(args, cfg=None) -> Path:
    if getattr(args, "repo", None):
        return Path(args.repo)
    if cfg is not None:
        return Path(cfg.repository_root)
    if getattr(args, "config", None):
        return Path(load_config(args.config).repository_root)
    return Path("repository")


def cmd_dataset(args) -> int:
    repo = Repository(_repo_root(args)).init()
    out_dir = repo.datasets
    seed = args.seed if args.seed is not None else 0
    a = args.action
    if a == "merge":
        merged = ds.merge_manifests([ds.load_manifest(p) for p in args.manifests])
        out = out_dir / f"{args.name}.json"
        ds.save_manifest(merged, out)
        _emit(args, {"records": len(merged), "classes": list(merged.class_names), "path": str(out)},
              f"merged {len(args.manifests)} manifests: {len(merged)} records -> {out}")
    elif a == "split":
        man = ds.load_manifest(args.manifest)
        train, val = ds.split_manifest(man, args.fraction, seed)
        stem = Path(args.manifest).stem
        tp, vp = out_dir / f"{stem}-train.json", out_dir / f"{stem}-val.json"
        ds.save_manifest(train, tp)
        ds.save_manifest(val, vp)
        _emit(args, {"train": len(train), "val": len(val), "train_path": str(tp), "val_path": str(vp)},
              f"train {len(train)} -> {tp}\nval   {len(val)} -> {vp}")
    elif a == "stats":
        stats = ds.dataset_stats(ds.load_manifest(args.manifest))
        out = out_dir / f"{Path(args.manifest).stem}-stats.json"
        doc = stats.to_dict()
        write_atomic(out, json.dumps(doc, indent=1) + "\n")
        lines = [f"images {stats.image_count}", f"instances {stats.instance_count}"]
        lines += [f"  {k}: {v}" for k, v in doc["per_class_name"].items()]
        _emit(args, doc, "\n".join(lines))
    elif a == "check":
        report = ds.scan_integrity(args.root, args.workers)
        out = out_dir / f"integrity-{digest_json(str(Path(args.root).resolve()))[:12]}.json"
        write_atomic(out, json.dumps(report.to_dict(), indent=1) + "\n")
        text = [f"{report.image_count} images, {report.label_count} label files, {len(report.issues)} issue(s)"]
        text += [f"  {i.kind}: {i.path} {i.detail}".rstrip() for i in report.issues]
        _emit(args, report.to_dict(), "\n".join(text))
        return 0 if report.ok else 1
    elif a == "build":
        man = ds.build_manifest_from_dir(args.root, [c for c in args.classes.split(",") if c], args.source)
        out = out_dir / f"{args.name or Path(args.root).name}.json"
        ds.save_manifest(man, out)
        _emit(args, {"records": len(man), "instances": man.instance_count, "path": str(out)},
              f"{len(man)} records, {man.instance_count} instances -> {out}")
    elif a == "convert":
        rows = ds.read_bbox_csv(args.csv)
        cm = ds.ColumnMapping(args.col_image_id, args.col_label, args.col_x_min, args.col_y_min,
                              args.col_x_max, args.col_y_max, args.single_class or None)
        ids = sorted({r[cm.image_id] for r in rows})
        paths: dict[str, str] = {}
        if args.images:
            dims = {}
            for i in ids:
                try:
                    p = find_image(Path(args.images), i)
                except FileNotFoundError:
                    continue
                with Image.open(p) as im:
                    dims[i] = im.size
                paths[i] = str(p)
        else:
            dims = {i: (args.width, args.height) for i in ids}
        result = ds.convert_bbox_table(rows, cm, dims)
        name = args.name or Path(args.csv).stem
        label_dir = out_dir / "labels" / name
        label_dir.mkdir(parents=True, exist_ok=True)
        records = []
        for i in ids:
            anns = result.annotations.get(i, [])
            safe = i.replace("/", "_")
            (label_dir / f"{safe}.txt").write_text(ds.write_label_file(anns), encoding="utf-8")
            w, h = dims[i]
            records.append(ds.ImageRecord(i, paths.get(i, i), w, h, tuple(anns), args.source))
        man = ds.DatasetManifest(tuple(records), tuple(result.class_names))
        out = out_dir / f"{name}.json"
        ds.save_manifest(man, out)
        for idx, reason in result.rejects:
            log.warning("row %d rejected: %s", idx + 2, reason)
        _emit(args, {"records": len(man), "instances": man.instance_count, "rejected": len(result.rejects), "path": str(out)},
              f"{len(man)} images, {man.instance_count} boxes, {len(result.rejects)} rejected -> {out}")
    return 0


def cmd_run(args) -> int:
    overrides = {
        k: getattr(args, k, None)
        for k in ("detections", "images", "vectors", "confidence_threshold", "pad_fraction", "pca_rule", "k",
                  "k_min", "k_max", "restarts", "region_name", "track_points", "cluster_summary", "workers", "seed")
    }
    if args.repo:
        overrides["repository_root"] = args.repo
    if args.mock_llm:
        overrides["llm"] = {"mock": True}
    cfg = load_config(args.config, overrides)
    result = run_pipeline(cfg)
    payload = {
        "run_id": result.run_id,
        "manifest": str(result.manifest_path),
        "cache_hits": sum(s.cache_hit for s in result.stages),
        "stages": [{"name": s.name, "cache_hit": s.cache_hit} for s in result.stages],
        "artifacts": {k: str(v) for k, v in result.artifacts.items()},
    }
    lines = [f"run {result.run_id}"]
    lines += [f"  {s.name:<9} {'cached' if s.cache_hit else 'computed'}" for s in result.stages]
    lines += [f"  {k}: {v}" for k, v in sorted(payload["artifacts"].items())]
    _emit(args, payload, "\n".join(lines))
    return 0


def cmd_predict(args) -> int:
    cfg = load_config(args.config, {"llm": {"mock": True}} if args.mock_llm else None)
    root = _repo_root(args, cfg)
    client = None
    if args.summarize:
        client = LLMClient(cfg.llm, ReportCache(Repository(root).init().reports))
    try:
        res = predict_crops(root, args.vectors, args.crops, args.pca_model, args.cluster_model, args.locations, client)
    finally:
        if client:
            client.close()
    payload = {
        "assignments": str(res.assignments),
        "predictions": [
            {"crop_id": c, "label": int(l), "distance": float(d)} for c, l, d in zip(res.ids, res.labels, res.distances)
        ],
    }
    if res.geojson:
        payload["geojson"] = str(res.geojson)
        payload["html"] = str(res.html)
    lines = [f"{c}\tcluster {int(l)}\tdistance {float(d):.4f}" for c, l, d in zip(res.ids, res.labels, res.distances)]
    lines.append(f"assignments -> {res.assignments}")
    _emit(args, payload, "\n".join(lines))
    return 0


def cmd_eval(args) -> int:
    result, out = evaluate_files(_repo_root(args), args.detections, args.manifest, args.iou, args.confidence)
    doc = result.to_dict() | {"path": str(out)}
    text = (f"mAP@{args.iou:g}  {result.map50:.4f}\nprecision {result.precision:.4f}\n"
            f"recall    {result.recall:.4f}\n(tp={result.tp} fp={result.fp} fn={result.fn}) -> {out}")
    _emit(args, doc, text)
    return 0


COMMANDS = {"dataset": cmd_dataset, "run": cmd_run, "predict": cmd_predict, "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (PredictError, EvaluationError, ConfigError, RepositoryBusy, ds.DatasetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``cogdet {prepare,train,evaluate,explain,sweep}``.

Exit codes: 0 success, 2 configuration/validation error, 3 training error,
4 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import cv2
import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from .backbone import build_backbone, finetune_backbone, import_pretrained, load_backbone, save_backbone
from .classifier import (
    ClassifierModel, build_head, gun_probabilities, load_classifier, save_classifier, train_classifier,
)
from .config import ExperimentConfig, dump_config, load_config
from .dataset import (
    ImageDatasetIndex, class_label, discover_dataset, discover_detection_corpus,
    frame_label_paths, load_detection_labels, read_image, sample_frames, split_dataset, write_manifest,
)
from .detector import BoundingBox, build_detector, finetune_detector, load_detector, save_detector
from .errors import CogdetError, DependencyError, LookupFailure, ValidationError
from .gradcam import explain_frame
from .metrics import classification_metrics, confusion_counts, roc_auc
from .pipeline import compare_modes, report_ap, run_detection_only, run_two_stage, summary_row, write_summary_csv

log = logging.getLogger("cogdet")

MANIFESTS = {"images": "images.json", "videos": "videos.json", "detection": "detection.json"}


# ------------------------------------------------------------------ output io


def write_json(path, payload: dict, cfg: ExperimentConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {**payload, "provenance": cfg.provenance()}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def write_png(path, frame, cfg: ExperimentConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[..., 0]
    info = PngInfo()
    info.add_text("provenance", json.dumps(cfg.provenance(), sort_keys=True))
    Image.fromarray(arr).save(path, pnginfo=info)
    return path


def _provenance_comment(cfg: ExperimentConfig) -> str:
    return "provenance " + json.dumps(cfg.provenance(), sort_keys=True)


def _draw_boxes(frame, boxes) -> np.ndarray:
    canvas = np.ascontiguousarray(np.clip(frame, 0, 1).copy())
    if canvas.shape[2] == 1:
        canvas = np.repeat(canvas, 3, axis=2)
    for b in boxes:
        cv2.rectangle(canvas, (int(b.x), int(b.y)), (int(b.x2) - 1, int(b.y2) - 1), (1.0, 0.0, 0.0), 1)
    return canvas


# ------------------------------------------------------------------ manifests


def _manifest_path(cfg, kind):
    return cfg.out / "manifests" / MANIFESTS[kind]


def _read_manifest(cfg, kind) -> dict:
    path = _manifest_path(cfg, kind)
    if not path.exists():
        raise DependencyError(f"manifest {path} missing; run `cogdet prepare` first")
    return json.loads(path.read_text())


def _detection_index(root) -> tuple[ImageDatasetIndex, list]:
    images, labels = discover_detection_corpus(root)
    has_box = [int(bool(lbl and load_detection_labels(lbl))) for lbl in labels]
    return ImageDatasetIndex(list(zip(images, has_box))), labels


def cmd_prepare(cfg: ExperimentConfig, args) -> int:
    written = []
    jobs = [("images", "image", cfg.data.image_split), ("videos", "video", cfg.data.video_split),
            ("detection", None, cfg.data.detection_split)]
    for name, kind, ratios in jobs:
        if getattr(cfg.data, name) is None:
            continue
        cfg.require_paths(name)
        root = getattr(cfg.data, name)
        index = _detection_index(root)[0] if kind is None else discover_dataset(root, kind)
        split = split_dataset(index, ratios, cfg.seed)
        extra = {"class_counts": {str(k): v for k, v in sorted(index.class_counts.items())},
                 "provenance": cfg.provenance()}
        path = _manifest_path(cfg, name)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_manifest(path, split, index, extra)
        written.append(path)
        log.info("%s: %d entries -> train %d / val %d / test %d", name, len(index),
                 len(split.train), len(split.val), len(split.test))
    if not written:
        raise ValidationError("config names no dataset paths (data.images / data.videos / data.detection)")
    dump_config(cfg, cfg.out / "config.resolved.yaml")
    return 0


# ------------------------------------------------------------------ loaders


def _load_images(paths):
    frames = [read_image(p) for p in paths]
    labels = [class_label(Path(p).parent.name) for p in paths]
    return frames, labels


def load_video(cfg: ExperimentConfig, path):
    """Sampled video plus per-frame pixel ground truth (keyed by sampled position)."""
    path = Path(path)
    sample = sample_frames(path, cfg.data.num_frames, cfg.data.frame_size,
                           class_label(path.parent.name), path.name)
    label_files = frame_label_paths(path)
    h, w = cfg.data.frame_size
    truth = {}
    if label_files:
        for pos, src in enumerate(sample.indices):
            lf = label_files[src]
            boxes = load_detection_labels(lf) if lf else []
            truth[pos] = [BoundingBox.from_ground_truth(b, w, h) for b in boxes]
    return sample, truth


def _load_videos(cfg, paths):
    samples, truths = [], {}
    for p in paths:
        sample, truth = load_video(cfg, p)
        samples.append(sample)
        if truth:
            truths[sample.source_id] = truth
    return samples, truths


def _load_detection(paths):
    images, labels = [], []
    for p in paths:
        p = Path(p)
        images.append(read_image(p))
        lf = p.parent.parent / "labels" / (p.stem + ".txt")
        labels.append(load_detection_labels(lf) if lf.exists() else [])
    return images, labels


def _ckpt(cfg, name) -> Path:
    return cfg.out / "checkpoints" / name


def _require_ckpt(cfg, name, producer) -> Path:
    path = _ckpt(cfg, name)
    if not path.with_suffix(".json").exists():
        raise DependencyError(f"checkpoint {path} missing; run `cogdet train --target {producer}` first")
    return path


# ------------------------------------------------------------------ train


def train_backbone_stage(cfg: ExperimentConfig):
    manifest = _read_manifest(cfg, "images")
    train_x, train_y = _load_images(manifest["train"])
    val_x, val_y = _load_images(manifest["val"] or manifest["train"])
    bcfg = cfg.backbone
    if bcfg.pretrained:
        source = import_pretrained(bcfg.pretrained, bcfg.architecture, **bcfg.arch_kwargs)
    else:
        source = build_backbone(bcfg.architecture, cfg.seed, **bcfg.arch_kwargs)
    source = replace(source, frozen_prefix=frozenset(bcfg.frozen_prefix))
    return finetune_backbone(source, (train_x, train_y), (val_x, val_y),
                             cfg.augment_policy(), cfg.train_config("backbone"))


def cmd_train(cfg: ExperimentConfig, args) -> int:
    target = args.target
    prov = cfg.provenance()
    if target == "backbone":
        state, history = train_backbone_stage(cfg)
        save_backbone(state, _ckpt(cfg, "backbone"), {"provenance": prov})
    elif target == "classifier":
        backbone = load_backbone(_require_ckpt(cfg, "backbone", "backbone"))
        manifest = _read_manifest(cfg, "videos")
        train_v, _ = _load_videos(cfg, manifest["train"])
        val_v, _ = _load_videos(cfg, manifest["val"] or manifest["train"])
        tcfg = cfg.train_config("classifier")
        head = build_head(cfg.head_config(), backbone.feature_dim, tcfg.seed)
        model = ClassifierModel(backbone, head, cfg.evaluate.decision_threshold, cfg.data.num_frames)
        model, history = train_classifier(model, train_v, val_v, tcfg)
        save_classifier(model, _ckpt(cfg, "classifier"), _ckpt(cfg, "backbone"), {"provenance": prov})
    elif target == "detector":
        manifest = _read_manifest(cfg, "detection")
        images, labels = _load_detection(manifest["train"])
        val_images, val_labels = _load_detection(manifest["val"]) if manifest["val"] else (None, None)
        tcfg = cfg.train_config("detector")
        state = build_detector(cfg.detector.detector_config(), tcfg.seed, width=cfg.detector.width)
        state = finetune_detector(state, images, labels, tcfg, val_images, val_labels)
        history = state.history
        save_detector(state, _ckpt(cfg, "detector"), {"provenance": prov})
    else:
        raise ValidationError(f"unknown train target {target!r}")
    write_json(cfg.out / "histories" / f"{target}.json", history.to_dict(), cfg)
    log.info("%s: best epoch %s (val loss %.4f), stopped at %s", target, history.best_epoch,
             history.best_val_loss, history.stopped_epoch)
    return 0


# ------------------------------------------------------------------ evaluate


def classifier_metrics(model: ClassifierModel, videos) -> dict:
    probs = gun_probabilities(model, videos)[:, 1]
    labels = [v.label for v in videos]
    preds = [int(p >= model.decision_threshold) for p in probs]
    counts = confusion_counts(preds, labels)
    out = {**classification_metrics(counts), "confusion": counts.to_dict()}
    if len(set(labels)) == 2:
        roc = roc_auc(probs, labels)
        out["auc"] = roc.auc
    else:
        roc, out["auc"] = None, None
    return out, roc


def _plot_roc(roc, path, title):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(roc.fpr, roc.tpr, label=f"AUC = {roc.auc:.4f}")
    ax.plot([0, 1], [0, 1], "--", color="grey")
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title(title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, metadata={"Description": title})
    plt.close(fig)


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    mode = args.mode
    manifest = _read_manifest(cfg, "videos")
    if not manifest["test"]:
        raise ValidationError("test split of the video manifest is empty")
    videos, truths = _load_videos(cfg, manifest["test"])
    out = cfg.out / "reports"
    out.mkdir(parents=True, exist_ok=True)
    metrics, rows = {"configuration": cfg.name}, []
    ev = cfg.evaluate

    classifier = detector = None
    if mode in ("two-stage", "both", "classifier"):
        classifier = load_classifier(_require_ckpt(cfg, "classifier", "classifier"))
        classifier = replace(classifier, decision_threshold=ev.decision_threshold)
        clf_metrics, roc = classifier_metrics(classifier, videos)
        metrics["classifier"] = clf_metrics
        if roc is not None:
            roc.write_csv(out / "roc.csv", _provenance_comment(cfg))
            _plot_roc(roc, out / "roc.png", cfg.name)
    if mode in ("two-stage", "both", "detection-only"):
        detector = load_detector(_require_ckpt(cfg, "detector", "detector"))

    reports = {}
    if mode in ("two-stage", "both"):
        reports["two-stage"] = run_two_stage(videos, classifier, detector, ev.workers)
    if mode in ("detection-only", "both"):
        reports["detection-only"] = run_detection_only(videos, detector, ev.workers)

    for name, report in reports.items():
        ap = report_ap(report, truths, ev.iou_threshold, ev.ap_interpolation).ap if truths else None
        write_json(out / f"report_{name}.json", report.to_dict(timing=True), cfg)
        label = cfg.name if name == "two-stage" else "detection-only"
        rows.append(summary_row(report, label, ap))
        metrics[name] = {
            "ap": ap,
            "ap_protocol": {"iou_threshold": ev.iou_threshold, "interpolation": ev.ap_interpolation,
                            "pooling": "frame-pooled"},
            "confusion": report.confusion.to_dict() if report.confusion else None,
            "detector_frame_invocations": report.detector_frame_invocations,
        }
        if ev.annotate:
            frames = {v.source_id: v.frames for v in videos}
            for rec in report.records:
                for fd in rec.detections:
                    write_png(out / "annotated" / name / rec.video_id / f"frame_{fd.index:03d}.png",
                              _draw_boxes(frames[rec.video_id][fd.index], fd.boxes), cfg)
    if len(reports) == 2:
        cmp = compare_modes(reports["two-stage"], reports["detection-only"], truths or None, ev.iou_threshold)
        write_json(out / "comparison.json", cmp.to_dict(timing=True), cfg)
        metrics["comparison"] = cmp.to_dict(timing=False)
    if rows:
        write_summary_csv(out / "summary.csv", rows, _provenance_comment(cfg))
    write_json(out / "metrics.json", metrics, cfg)
    log.info("wrote reports to %s", out)
    return 0


# ------------------------------------------------------------------ explain


def cmd_explain(cfg: ExperimentConfig, args) -> int:
    manifest = _read_manifest(cfg, "videos")
    paths = {Path(p).name: p for split in ("train", "val", "test") for p in manifest[split]}
    if args.video_id not in paths:
        raise LookupFailure(f"unknown video id {args.video_id!r}")
    sample, _ = load_video(cfg, paths[args.video_id])
    model = load_classifier(_require_ckpt(cfg, "classifier", "classifier"))
    indices = args.frames or list(range(sample.num_frames))
    for i in indices:
        if not 0 <= i < sample.num_frames:
            raise LookupFailure(f"frame index {i} outside 0..{sample.num_frames - 1}")
    out = cfg.out / "explain" / args.video_id
    for i in indices:
        hm, image = explain_frame(model, sample.frames[i], args.class_id, args.alpha)
        write_png(out / f"frame_{i:03d}.png", image, cfg)
        if args.csv:
            np.savetxt(out / f"frame_{i:03d}_cam.csv", hm.values, delimiter=",",
                       header=_provenance_comment(cfg))
    log.info("wrote %d overlays to %s", len(indices), out)
    return 0


# ------------------------------------------------------------------ sweep


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    out = cfg.out / "sweep"
    out.mkdir(parents=True, exist_ok=True)
    for arch in cfg.sweep["backbones"]:
        for kind in cfg.sweep["heads"]:
            name = f"{arch}+{kind}"
            sub = replace(cfg, name=name, output_dir=str(cfg.out / "runs" / f"{arch}_{kind}"),
                          backbone=replace(cfg.backbone, architecture=arch),
                          head={**cfg.head, "kind": kind})
            dump_config(sub, out / f"{arch}_{kind}.yaml")
    log.info("wrote %d configs to %s", len(cfg.sweep["backbones"]) * len(cfg.sweep["heads"]), out)
    return 0


# ------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment YAML file")
    common.add_argument("--seed", type=int, default=None, help="override the global seed")
    common.add_argument("--out", default=None, help="override the output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cogdet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="discover corpora and write split manifests")
    p = sub.add_parser("train", parents=[common], help="train one stage")
    p.add_argument("--target", choices=["backbone", "classifier", "detector"], required=True)
    p = sub.add_parser("evaluate", parents=[common], help="evaluate on the test split")
    p.add_argument("--mode", choices=["two-stage", "detection-only", "both", "classifier"], default="both")
    p = sub.add_parser("explain", parents=[common], help="Grad-CAM overlays for one video")
    p.add_argument("--video-id", required=True)
    p.add_argument("--frames", type=lambda s: [int(x) for x in s.split(",") if x], default=None,
                   help="comma-separated sampled frame positions")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--class-id", type=int, default=1)
    p.add_argument("--csv", action="store_true", help="also write raw maps as CSV")
    sub.add_parser("sweep", parents=[common], help="write the backbone x head config grid")
    return parser


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "evaluate": cmd_evaluate,
            "explain": cmd_explain, "sweep": cmd_sweep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.out)
        return COMMANDS[args.command](cfg, args)
    except CogdetError as exc:
        print(f"cogdet {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

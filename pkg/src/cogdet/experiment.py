"""End-to-end desk-scale run on the synthetic bright-square corpus."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

from .augment import AugmentPolicy
from .backbone import build_backbone, finetune_backbone, image_accuracy, init_from_pretrained
from .classifier import ClassifierModel, HeadConfig, build_head, train_classifier, video_accuracy
from .detector import BoundingBox, DetectorConfig, box_recall, build_detector, finetune_detector
from .metrics import average_precision
from .pipeline import compare_modes, report_ap, run_detection_only, run_two_stage
from .synthetic import make_images, make_videos
from .training import TrainConfig


@dataclass
class DeskConfig:
    seed: int = 0
    frame_size: int = 32
    num_frames: int = 8
    n_images: int = 240
    n_val_images: int = 60
    n_test_images: int = 60
    n_videos: int = 64
    n_val_videos: int = 24
    n_test_videos: int = 40
    heads: tuple[str, ...] = ("lstm", "gru", "transformer")
    routing_head: str = "gru"
    detector_input: int = 64
    backbone_train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=30, early_stop_patience=5, batch_size=32, learning_rate=3e-3))
    head_train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=60, early_stop_patience=5, batch_size=16, learning_rate=1e-3))
    detector_train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=60, early_stop_patience=5, batch_size=16, learning_rate=3e-3))


def _seeded(cfg: TrainConfig, seed: int) -> TrainConfig:
    return TrainConfig(cfg.epochs, cfg.early_stop_patience, cfg.batch_size, cfg.learning_rate, seed,
                       cfg.weight_decay)


def video_ground_truth(videos, size: int) -> dict:
    return {
        v.sample.source_id: {t: [BoundingBox.from_ground_truth(b, size, size) for b in boxes]
                             for t, boxes in enumerate(v.boxes)}
        for v in videos
    }


def fn_propagation_curve(detections, truths, gun_ids, ks, iou_threshold=0.5) -> dict:
    """AP when the first ``k`` Gun videos are treated as stage-1 misses.

    Detections are held fixed; excluded videos lose their detections and keep
    their ground truth in the denominator.
    """
    return {k: average_precision(detections, truths, iou_threshold, gun_ids[:k]).ap for k in ks}


def run_desk_experiment(cfg: DeskConfig | None = None) -> dict:
    """Train every stage and evaluate both modes.

    Returns ``{"metrics": ..., "timing": ..., "reports": ..., "models": ...}``;
    ``metrics`` holds no wall-clock values and is reproducible for a fixed seed.
    """
    cfg = cfg or DeskConfig()
    s = cfg.seed
    timing = {}
    t0 = time.perf_counter()

    x, y, _ = make_images(cfg.n_images, s * 100 + 1)
    vx, vy, _ = make_images(cfg.n_val_images, s * 100 + 2)
    tx, ty, _ = make_images(cfg.n_test_images, s * 100 + 3)
    source = build_backbone("small-conv", seed=s)
    backbone, bb_hist = finetune_backbone(init_from_pretrained(source), (x, y), (vx, vy),
                                          AugmentPolicy(), _seeded(cfg.backbone_train, s))
    timing["backbone_s"] = time.perf_counter() - t0

    train_v = [v.sample for v in make_videos(cfg.n_videos, s * 100 + 4, cfg.num_frames, prefix="train")]
    val_v = [v.sample for v in make_videos(cfg.n_val_videos, s * 100 + 5, cfg.num_frames, prefix="val")]
    test = make_videos(cfg.n_test_videos, s * 100 + 6, cfg.num_frames, prefix="test")
    test_v = [v.sample for v in test]

    classifiers, head_metrics = {}, {}
    for kind in cfg.heads:
        t = time.perf_counter()
        head = build_head(HeadConfig(kind=kind), backbone.feature_dim, seed=s)
        model, hist = train_classifier(ClassifierModel(backbone, head), train_v, val_v, _seeded(cfg.head_train, s))
        classifiers[kind] = model
        head_metrics[kind] = {"test_accuracy": video_accuracy(model, test_v), "best_epoch": hist.best_epoch,
                              "stopped_epoch": hist.stopped_epoch}
        timing[f"head_{kind}_s"] = time.perf_counter() - t

    t = time.perf_counter()
    dx, _, dboxes = make_images(cfg.n_images, s * 100 + 7)
    dvx, _, dvboxes = make_images(cfg.n_val_images, s * 100 + 8)
    dtx, _, dtboxes = make_images(cfg.n_test_images, s * 100 + 9)
    det_cfg = DetectorConfig(input_size=cfg.detector_input)
    detector = finetune_detector(build_detector(det_cfg, seed=s), list(dx), dboxes,
                                 _seeded(cfg.detector_train, s), list(dvx), dvboxes)
    recall = box_recall(detector, list(dtx), dtboxes)
    timing["detector_s"] = time.perf_counter() - t

    truths = video_ground_truth(test, cfg.frame_size)
    routing = classifiers[cfg.routing_head]
    two = run_two_stage(test_v, routing, detector)
    only = run_detection_only(test_v, detector)
    cmp = compare_modes(two, only, truths)
    gun_ids = [v.source_id for v in test_v if v.label == 1]
    curve = fn_propagation_curve(only.detections_by_video(), truths, gun_ids, range(0, min(len(gun_ids), 10) + 1))
    timing["total_s"] = time.perf_counter() - t0

    metrics = {
        "seed": s,
        "backbone": {"test_image_accuracy": image_accuracy(backbone, tx, ty),
                     "best_epoch": bb_hist.best_epoch, "stopped_epoch": bb_hist.stopped_epoch},
        "heads": head_metrics,
        "detector": {"heldout_recall_iou50": recall, "best_epoch": detector.history.best_epoch},
        "two_stage": {
            "routing_head": cfg.routing_head,
            "confusion": two.confusion.to_dict(),
            "detector_frame_invocations": two.detector_frame_invocations,
            "ap": report_ap(two, truths).ap,
        },
        "detection_only": {"detector_frame_invocations": only.detector_frame_invocations,
                           "ap": report_ap(only, truths).ap},
        "comparison": cmp.to_dict(timing=False),
        "fn_propagation_ap": {str(k): v for k, v in curve.items()},
        "num_frames": cfg.num_frames,
        "num_test_videos": len(test_v),
    }
    return {"metrics": metrics, "timing": timing,
            "reports": {"two_stage": two, "detection_only": only, "truths": truths},
            "models": {"backbone": backbone, "classifiers": classifiers, "detector": detector}}


def metrics_json(result: dict) -> str:
    return json.dumps(result["metrics"], indent=2, sort_keys=True)

"""Classification-oriented routing: detect only in videos the classifier flags.

The detection-only baseline runs the detector on every frame of every video.
Efficiency is compared through detector frame invocations, the
machine-independent cause of any wall-clock saving.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .classifier import ClassifierModel, classify_video
from .detector import DetectorState, FrameDetections, detect_frames
from .errors import ConfigError, ValidationError
from .metrics import ApResult, ConfusionCounts, average_precision, confusion_counts

TWO_STAGE = "two-stage"
DETECTION_ONLY = "detection-only"

SUMMARY_COLUMNS = ["configuration", "TP", "FP", "FN", "TN", "AP",
                  "detector_frame_invocations", "time_s", "model_size_bytes"]


@dataclass
class RoutingRecord:
    video_id: str
    true_label: int
    predicted_label: int | None
    p_gun: float | None
    routed_to_detector: bool
    detections: list[FrameDetections] = field(default_factory=list)
    stage1_time: float = 0.0
    stage2_time: float = 0.0
    frames_detected_on: int = 0

    def __post_init__(self):
        if self.predicted_label is not None and self.routed_to_detector != (self.predicted_label == 1):
            raise ValidationError("a video is routed to the detector iff it is predicted Gun")
        if not self.routed_to_detector and self.detections:
            raise ValidationError("unrouted videos cannot carry detections")

    def to_dict(self, timing: bool = True) -> dict:
        d = {
            "video_id": self.video_id,
            "true_label": self.true_label,
            "predicted_label": self.predicted_label,
            "p_gun": self.p_gun,
            "routed_to_detector": self.routed_to_detector,
            "frames_detected_on": self.frames_detected_on,
            "detections": [fd.to_dict() for fd in self.detections],
        }
        if timing:
            d["stage1_time_s"] = self.stage1_time
            d["stage2_time_s"] = self.stage2_time
        return d


@dataclass
class PipelineReport:
    mode: str
    records: list[RoutingRecord]
    confusion: ConfusionCounts | None = None
    batch_wall_clock: float = 0.0
    model_size_bytes: int | None = None

    def __post_init__(self):
        if self.confusion is not None and self.confusion.total != len(self.records):
            raise ValidationError("confusion counts do not cover every record")

    @property
    def detector_frame_invocations(self) -> int:
        return sum(r.frames_detected_on for r in self.records)

    @property
    def total_time(self) -> float:
        """Sum of per-video inference intervals (seconds)."""
        return sum(r.stage1_time + r.stage2_time for r in self.records)

    @property
    def video_ids(self) -> list[str]:
        return [r.video_id for r in self.records]

    def detections_by_video(self) -> dict[str, list[FrameDetections]]:
        return {r.video_id: r.detections for r in self.records}

    @property
    def false_negative_videos(self) -> list[str]:
        return [r.video_id for r in self.records if r.true_label == 1 and r.predicted_label == 0]

    def to_dict(self, timing: bool = True) -> dict:
        d = {
            "mode": self.mode,
            "confusion": self.confusion.to_dict() if self.confusion else None,
            "detector_frame_invocations": self.detector_frame_invocations,
            "model_size_bytes": self.model_size_bytes,
            "records": [r.to_dict(timing) for r in self.records],
        }
        if timing:
            d["timing"] = {
                "kind": "inference-only",
                "total_time_s": self.total_time,
                "batch_wall_clock_s": self.batch_wall_clock,
            }
        return d


def _map_ordered(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _check_compatible(classifier: ClassifierModel | None, detector: DetectorState):
    if classifier is not None and classifier.in_channels != detector.in_channels:
        raise ConfigError(
            f"classifier expects {classifier.in_channels}-channel frames, "
            f"detector expects {detector.in_channels}"
        )


def _detect(detector: DetectorState, sample):
    start = time.perf_counter()
    dets = detect_frames(detector, list(sample.frames))
    return dets, time.perf_counter() - start


def run_two_stage(videos: Sequence, classifier: ClassifierModel, detector: DetectorState,
                  workers: int = 1) -> PipelineReport:
    """Classify every video; run the detector only on those predicted Gun."""
    _check_compatible(classifier, detector)

    def process(sample) -> RoutingRecord:
        start = time.perf_counter()
        label, p_gun = classify_video(classifier, sample)
        stage1 = time.perf_counter() - start
        dets, stage2, n = [], 0.0, 0
        if label == 1:
            dets, stage2 = _detect(detector, sample)
            n = sample.num_frames
        return RoutingRecord(sample.source_id, sample.label, label, p_gun, label == 1, dets, stage1, stage2, n)

    wall = time.perf_counter()
    records = _map_ordered(process, list(videos), workers)
    wall = time.perf_counter() - wall
    confusion = confusion_counts([r.predicted_label for r in records], [r.true_label for r in records])
    return PipelineReport(TWO_STAGE, records, confusion, wall,
                          classifier.size_bytes() + detector.size_bytes())


def run_detection_only(videos: Sequence, detector: DetectorState, workers: int = 1) -> PipelineReport:
    """Exhaustive baseline: detector on every frame of every video."""
    _check_compatible(None, detector)

    def process(sample) -> RoutingRecord:
        dets, stage2 = _detect(detector, sample)
        return RoutingRecord(sample.source_id, sample.label, None, None, True, dets, 0.0, stage2, sample.num_frames)

    wall = time.perf_counter()
    records = _map_ordered(process, list(videos), workers)
    wall = time.perf_counter() - wall
    return PipelineReport(DETECTION_ONLY, records, None, wall, detector.size_bytes())


def report_ap(report: PipelineReport, ground_truths: Mapping, iou_threshold: float = 0.5,
              interpolation: str = "all-point") -> ApResult:
    """AP of a report; ground truth of stage-1 false negatives counts as missed."""
    return average_precision(report.detections_by_video(), ground_truths, iou_threshold,
                             report.false_negative_videos, interpolation)


@dataclass
class ComparisonReport:
    invocation_ratio: float | None
    time_ratio: float | None
    two_stage_invocations: int
    detection_only_invocations: int
    ap_two_stage: float | None = None
    ap_detection_only: float | None = None
    false_negative_videos: list[str] = field(default_factory=list)

    @property
    def ap_delta(self) -> float | None:
        if self.ap_two_stage is None or self.ap_detection_only is None:
            return None
        return self.ap_two_stage - self.ap_detection_only

    def to_dict(self, timing: bool = True) -> dict:
        d = {
            "invocation_ratio": self.invocation_ratio,
            "two_stage_invocations": self.two_stage_invocations,
            "detection_only_invocations": self.detection_only_invocations,
            "ap_two_stage": self.ap_two_stage,
            "ap_detection_only": self.ap_detection_only,
            "ap_delta": self.ap_delta,
            "false_negative_videos": self.false_negative_videos,
        }
        if timing:
            d["time_ratio"] = self.time_ratio
        return d


def compare_modes(two_stage: PipelineReport, detection_only: PipelineReport,
                  ground_truths: Mapping | None = None, iou_threshold: float = 0.5) -> ComparisonReport:
    if sorted(two_stage.video_ids) != sorted(detection_only.video_ids):
        raise ValidationError("reports cover different video sets")
    inv2, inv1 = two_stage.detector_frame_invocations, detection_only.detector_frame_invocations
    out = ComparisonReport(
        invocation_ratio=inv2 / inv1 if inv1 else None,
        time_ratio=two_stage.total_time / detection_only.total_time if detection_only.total_time else None,
        two_stage_invocations=inv2,
        detection_only_invocations=inv1,
        false_negative_videos=two_stage.false_negative_videos,
    )
    if ground_truths is not None:
        out.ap_two_stage = report_ap(two_stage, ground_truths, iou_threshold).ap
        out.ap_detection_only = report_ap(detection_only, ground_truths, iou_threshold).ap
    return out


def summary_row(report: PipelineReport, configuration: str, ap: float | None = None) -> dict:
    c = report.confusion
    na = "N/A"
    return {
        "configuration": configuration,
        "TP": c.tp if c else na,
        "FP": c.fp if c else na,
        "FN": c.fn if c else na,
        "TN": c.tn if c else na,
        "AP": na if ap is None else round(ap, 4),
        "detector_frame_invocations": report.detector_frame_invocations,
        "time_s": round(report.total_time, 4),
        "model_size_bytes": report.model_size_bytes if report.model_size_bytes is not None else na,
    }


def write_summary_csv(path, rows: Sequence[dict], comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)

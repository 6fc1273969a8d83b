"""Classification metrics, ROC/AUC and IoU-matched average precision."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .detector import BoundingBox, iou
from .errors import ValidationError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValidationError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> dict:
        return {"TP": self.tp, "FP": self.fp, "FN": self.fn, "TN": self.tn}


def confusion_counts(predicted, actual) -> ConfusionCounts:
    """Video-level counts with Gun (1) as the positive class."""
    p = np.asarray(predicted, dtype=int)
    y = np.asarray(actual, dtype=int)
    if p.shape != y.shape:
        raise ValidationError(f"{p.size} predictions but {y.size} labels")
    if not (np.isin(p, (0, 1)).all() and np.isin(y, (0, 1)).all()):
        raise ValidationError("labels must be binary")
    return ConfusionCounts(
        tp=int(((p == 1) & (y == 1)).sum()),
        fp=int(((p == 1) & (y == 0)).sum()),
        fn=int(((p == 0) & (y == 1)).sum()),
        tn=int(((p == 0) & (y == 0)).sum()),
    )


def _ratio(num, den):
    return num / den if den else None


def classification_metrics(c: ConfusionCounts) -> dict:
    """Accuracy, precision, recall and F1; ``None`` marks an undefined value."""
    if c.total == 0:
        raise ValidationError("confusion counts are all zero")
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    if precision is None or recall is None:
        f1 = None
    else:
        f1 = _ratio(2 * precision * recall, precision + recall)
    return {
        "accuracy": (c.tp + c.tn) / c.total,
        "precision": precision,
        "recall": recall,
        "f1": f1,
    }


@dataclass
class RocCurve:
    fpr: list[float]
    tpr: list[float]
    thresholds: list[float]
    auc: float

    def write_csv(self, path, header_comment: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            writer = csv.writer(fh)
            writer.writerow(["threshold", "fpr", "tpr"])
            for t, f, r in zip(self.thresholds, self.fpr, self.tpr):
                writer.writerow([t, f, r])


def roc_auc(scores, labels) -> RocCurve:
    """ROC swept over distinct scores (ties form one step); trapezoidal AUC."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    if s.shape != y.shape:
        raise ValidationError("scores and labels differ in length")
    n_pos, n_neg = int((y == 1).sum()), int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("ROC needs at least one positive and one negative label")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_group = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tps = np.cumsum(y)[last_of_group]
    fps = (last_of_group + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, s[last_of_group]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(fpr.tolist(), tpr.tolist(), thresholds.tolist(), auc)


# ------------------------------------------------------------------------ AP


@dataclass
class ApResult:
    ap: float
    precision: list[float]
    recall: list[float]
    matches: list[tuple] = field(default_factory=list)  # (video, frame, det_idx, gt_idx, iou)
    iou_threshold: float = 0.5
    num_ground_truth: int = 0
    num_detections: int = 0
    interpolation: str = "all-point"
    pooling: str = "frame-pooled"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["matches"] = [list(m) for m in self.matches]
        return d


def _frames_of(entry) -> dict[int, list]:
    """Accept ``{frame: boxes}`` or a list of objects with ``index``/``boxes``."""
    if entry is None:
        return {}
    if isinstance(entry, Mapping):
        return {int(k): list(v) for k, v in entry.items()}
    return {fd.index: list(fd.boxes) for fd in entry}


def match_detections(detections, ground_truths, iou_threshold=0.5, excluded_videos=()):
    """Greedy confidence-ordered matching, restricted to the same video and frame.

    Returns ``(records, num_gt, matches)`` where ``records`` is a list of
    ``(confidence, is_tp)`` in processing order.
    """
    excluded = set(excluded_videos)
    gts = {v: _frames_of(g) for v, g in ground_truths.items()}
    num_gt = sum(len(b) for frames in gts.values() for b in frames.values())
    pooled = []
    for vid in sorted(detections, key=str):
        if vid in excluded:
            continue  # rejected by stage 1, never reaches the detector
        for frame, boxes in sorted(_frames_of(detections[vid]).items()):
            for k, box in enumerate(boxes):
                pooled.append((box.confidence, str(vid), frame, k, vid, box))
    pooled.sort(key=lambda r: (-r[0], r[1], r[2], r[3]))
    used = set()
    records, matches = [], []
    for conf, _, frame, k, vid, box in pooled:
        candidates = gts.get(vid, {}).get(frame, [])
        best, best_iou = None, iou_threshold
        for g, gt in enumerate(candidates):
            if (vid, frame, g) in used:
                continue
            o = iou(box, gt)
            if o >= best_iou and (best is None or o > best_iou):
                best, best_iou = g, o
        if best is None:
            records.append((conf, False))
        else:
            used.add((vid, frame, best))
            records.append((conf, True))
            matches.append((vid, frame, k, best, best_iou))
    return records, num_gt, matches


def _pr_points(records, num_gt):
    """Cumulative precision/recall at the end of each equal-confidence group."""
    conf = np.array([r[0] for r in records], dtype=float)
    tp = np.cumsum([r[1] for r in records], dtype=float)
    fp = np.arange(1, len(records) + 1) - tp
    ends = np.r_[np.nonzero(np.diff(conf))[0], len(conf) - 1] if len(conf) else np.array([], int)
    return tp[ends] / (tp[ends] + fp[ends]), tp[ends] / num_gt


def interpolated_ap(precision, recall, interpolation="all-point") -> float:
    precision = np.asarray(precision, dtype=float)
    recall = np.asarray(recall, dtype=float)
    if interpolation == "11-point":
        total = 0.0
        for t in np.linspace(0, 1, 11):
            mask = recall >= t - 1e-12
            total += precision[mask].max() if mask.any() else 0.0
        return float(total / 11)
    if interpolation != "all-point":
        raise ValidationError(f"unknown interpolation {interpolation!r}")
    if len(recall) == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.r_[0.0, recall])
    return float(np.sum(steps * envelope))


def average_precision(detections, ground_truths, iou_threshold: float = 0.5,
                      excluded_videos: Sequence = (), interpolation: str = "all-point") -> ApResult:
    """Single-class AP pooled over every frame of every video.

    ``detections`` and ``ground_truths`` map video id to per-frame boxes.
    Ground-truth boxes of ``excluded_videos`` (stage-1 false negatives) stay in
    the recall denominator as unrecoverable misses.
    """
    if iou_threshold < 0:
        raise ValidationError("iou_threshold must be non-negative")
    unknown = set(excluded_videos) - set(ground_truths) - set(detections)
    if unknown:
        raise ValidationError(f"excluded videos not in the evaluation set: {sorted(map(str, unknown))}")
    records, num_gt, matches = match_detections(detections, ground_truths, iou_threshold, excluded_videos)
    if num_gt == 0:
        raise ValidationError("AP is undefined without ground-truth boxes")
    precision, recall = _pr_points(records, num_gt)
    ap = interpolated_ap(precision, recall, interpolation)
    return ApResult(ap, precision.tolist(), recall.tolist(), matches, iou_threshold,
                    num_gt, len(records), interpolation)


def ground_truth_boxes(frame_boxes: Mapping[int, Sequence], width: int, height: int) -> dict[int, list[BoundingBox]]:
    """Convert normalized label boxes per frame into pixel boxes."""
    return {
        f: [b if isinstance(b, BoundingBox) else BoundingBox.from_ground_truth(b, width, height) for b in boxes]
        for f, boxes in frame_boxes.items()
    }

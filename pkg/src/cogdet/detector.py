"""Stage-2 detector: multi-scale grid prediction, confidence filter, NMS.

Each grid cell at stride ``s`` predicts one box as
``(dx, dy, w_rel, h_rel, objectness)``, all in [0, 1]. The box centre is
``((j + dx) * s, (i + dy) * s)`` and its size ``(w_rel, h_rel) * input_size``
in letterboxed input pixels.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dataset import GroundTruthBox
from .errors import LoadError, ValidationError
from .training import TrainConfig, TrainingHistory, fit, minibatches, seeded


@dataclass(frozen=True)
class BoundingBox:
    """Top-left anchored pixel box with a confidence and a detection flag."""

    x: float
    y: float
    w: float
    h: float
    confidence: float = 1.0
    cls: int = 1

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValidationError(f"box must have positive size, got w={self.w} h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h,
                "conf": self.confidence, "class": self.cls}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundingBox":
        return cls(d["x"], d["y"], d["w"], d["h"], d.get("conf", 1.0), d.get("class", 1))

    @classmethod
    def from_ground_truth(cls, gt: GroundTruthBox, width: int, height: int) -> "BoundingBox":
        return cls(*gt.to_pixels(width, height))


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def clamp_box(box: BoundingBox, width: float, height: float) -> BoundingBox | None:
    """Clip to the frame; ``None`` if nothing is left."""
    x0, y0 = max(0.0, box.x), max(0.0, box.y)
    x1, y1 = min(float(width), box.x2), min(float(height), box.y2)
    if x1 <= x0 or y1 <= y0:
        return None
    return BoundingBox(x0, y0, x1 - x0, y1 - y0, box.confidence, box.cls)


@dataclass(frozen=True)
class DetectorConfig:
    input_size: int = 640
    strides: tuple[int, ...] = (8, 16, 32)
    confidence_threshold: float = 0.25
    nms_iou_threshold: float = 0.45

    def __post_init__(self):
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if self.input_size < 1 or not self.strides:
            raise ValidationError("input_size and strides must be positive")
        for s in self.strides:
            if s < 1 or self.input_size % s:
                raise ValidationError(f"input_size {self.input_size} not divisible by stride {s}")
        for name in ("confidence_threshold", "nms_iou_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1]")

    @property
    def grids(self) -> tuple[int, ...]:
        return tuple(self.input_size // s for s in self.strides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strides"] = list(self.strides)
        return d


@dataclass
class FrameDetections:
    index: int
    boxes: list[BoundingBox] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"index": self.index, "boxes": [b.to_dict() for b in self.boxes]}

    @classmethod
    def from_dict(cls, d: dict) -> "FrameDetections":
        return cls(d["index"], [BoundingBox.from_dict(b) for b in d["boxes"]])


# ------------------------------------------------------------------ decoding


def _check_raw(raw: Sequence[np.ndarray], cfg: DetectorConfig) -> list[np.ndarray]:
    if len(raw) != len(cfg.strides):
        raise ValidationError(f"expected {len(cfg.strides)} scales, got {len(raw)}")
    out = []
    for arr, s in zip(raw, cfg.grids):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != (s, s, 5):
            raise ValidationError(f"scale expects shape {(s, s, 5)}, got {arr.shape}")
        out.append(arr)
    return out


def decode_predictions(raw: Sequence[np.ndarray], cfg: DetectorConfig) -> list[BoundingBox]:
    """Turn per-scale ``S x S x 5`` grids into boxes above the confidence threshold."""
    boxes = []
    for arr, stride in zip(_check_raw(raw, cfg), cfg.strides):
        rows, cols = np.nonzero(arr[..., 4] >= cfg.confidence_threshold)
        for i, j in zip(rows.tolist(), cols.tolist()):
            dx, dy, wr, hr, obj = arr[i, j]
            w, h = wr * cfg.input_size, hr * cfg.input_size
            if w <= 0 or h <= 0:
                continue
            cx, cy = (j + dx) * stride, (i + dy) * stride
            boxes.append(BoundingBox(cx - w / 2, cy - h / 2, w, h, float(obj)))
    return boxes


def assign_stride(box: BoundingBox, cfg: DetectorConfig) -> int:
    """Scale whose stride best matches the box: largest side / stride closest to 8."""
    side = max(box.w, box.h)
    return min(cfg.strides, key=lambda s: (abs(side / s - 8.0), s))


def encode_box(box: BoundingBox, cfg: DetectorConfig, stride: int | None = None):
    """Responsible cell and target vector for ``box`` (inverse of decoding)."""
    stride = stride or assign_stride(box, cfg)
    grid = cfg.input_size // stride
    cx, cy = box.x + box.w / 2, box.y + box.h / 2
    j = min(grid - 1, max(0, int(cx // stride)))
    i = min(grid - 1, max(0, int(cy // stride)))
    vec = np.array([cx / stride - j, cy / stride - i,
                    box.w / cfg.input_size, box.h / cfg.input_size, 1.0])
    return stride, i, j, vec


def nms(boxes: Sequence[BoundingBox], iou_threshold: float) -> list[BoundingBox]:
    """Greedy per-class suppression; output sorted by (confidence desc, x, y)."""
    order = sorted(boxes, key=lambda b: (-b.confidence, b.x, b.y))
    kept: list[BoundingBox] = []
    for box in order:
        if all(k.cls != box.cls or iou(k, box) <= iou_threshold for k in kept):
            kept.append(box)
    return kept


# ------------------------------------------------------------------ letterbox


def letterbox(frame: np.ndarray, size: int, pad_value: float = 0.5):
    """Aspect-preserving resize onto a ``size x size`` canvas.

    Returns ``(canvas, scale, pad_x, pad_y)``; original coordinates map to
    ``x * scale + pad_x``.
    """
    h, w = frame.shape[:2]
    scale, pad_x, pad_y = _geometry(h, w, size)
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    resized = frame if (nh, nw) == (h, w) else cv2.resize(frame, (nw, nh), interpolation=cv2.INTER_LINEAR)
    if resized.ndim == 2:
        resized = resized[..., None]
    canvas = np.full((size, size, frame.shape[2]), pad_value, dtype=np.float32)
    canvas[pad_y:pad_y + nh, pad_x:pad_x + nw] = resized
    return canvas, scale, pad_x, pad_y


def _to_letterbox(box: BoundingBox, scale, pad_x, pad_y) -> BoundingBox:
    return BoundingBox(box.x * scale + pad_x, box.y * scale + pad_y, box.w * scale, box.h * scale,
                       box.confidence, box.cls)


def _from_letterbox(box: BoundingBox, scale, pad_x, pad_y) -> BoundingBox:
    return BoundingBox((box.x - pad_x) / scale, (box.y - pad_y) / scale, box.w / scale, box.h / scale,
                       box.confidence, box.cls)


# ------------------------------------------------------------------ network


class GridDetectorNet(nn.Module):
    """Small anchor-free detector: strided conv trunk with one 1x1 head per scale."""

    def __init__(self, cfg: DetectorConfig, in_channels: int = 3, width: int = 32):
        super().__init__()
        strides = cfg.strides
        if any(b != 2 * a for a, b in zip(strides, strides[1:])) or strides[0] & (strides[0] - 1):
            raise ValidationError("built-in detector needs power-of-two strides doubling per scale")
        stem, prev, s = [], in_channels, 1
        while s < strides[0]:
            stem += [nn.Conv2d(prev, width, 3, stride=2, padding=1), nn.ReLU()]
            prev, s = width, s * 2
        stem += [nn.Conv2d(prev, width, 3, padding=1), nn.ReLU()]
        self.stem = nn.Sequential(*stem)
        self.downs = nn.ModuleList(
            nn.Sequential(nn.Conv2d(width, width, 3, stride=2, padding=1), nn.ReLU())
            for _ in strides[1:]
        )
        self.heads = nn.ModuleList(nn.Conv2d(width, 5, 1) for _ in strides)
        with torch.no_grad():
            for head in self.heads:
                head.bias[4] = -4.0  # start with low objectness everywhere

    def forward(self, x):
        """List of ``B x S x S x 5`` tensors in [0, 1], one per stride."""
        feats = [self.stem(x)]
        for down in self.downs:
            feats.append(down(feats[-1]))
        return [torch.sigmoid(h(f)).permute(0, 2, 3, 1) for h, f in zip(self.heads, feats)]


@dataclass
class DetectorState:
    config: DetectorConfig
    net: GridDetectorNet
    in_channels: int = 3
    width: int = 32
    seed: int = 0
    architecture: str = "grid-small"
    history: TrainingHistory | None = None

    def parameters(self) -> dict[str, np.ndarray]:
        return {k: v.detach().numpy().copy() for k, v in self.net.state_dict().items()}

    def size_bytes(self) -> int:
        return sum(v.numel() * v.element_size() for v in self.net.state_dict().values())


def build_detector(cfg: DetectorConfig | None = None, seed: int = 0, in_channels: int = 3, width: int = 32) -> DetectorState:
    cfg = cfg or DetectorConfig()
    with seeded(seed):
        net = GridDetectorNet(cfg, in_channels, width)
    net.eval()
    return DetectorState(cfg, net, in_channels, width, seed)


def _prepare(frames, cfg: DetectorConfig, in_channels: int):
    canvases, geoms = [], []
    for f in frames:
        f = np.asarray(f, dtype=np.float32)
        if f.ndim != 3 or f.shape[2] != in_channels:
            raise ValidationError(f"detector expects H x W x {in_channels} frames, got {f.shape}")
        canvas, scale, px, py = letterbox(f, cfg.input_size)
        canvases.append(canvas)
        geoms.append((scale, px, py, f.shape[1], f.shape[0]))
    x = torch.from_numpy(np.ascontiguousarray(np.stack(canvases).transpose(0, 3, 1, 2)))
    return x, geoms


def raw_predictions(state: DetectorState, frames, batch_size: int = 64):
    """Per frame, the list of per-scale ``S x S x 5`` numpy grids."""
    frames = list(frames)
    if not frames:
        return []
    x, _ = _prepare(frames, state.config, state.in_channels)
    state.net.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            scales = [s.numpy() for s in state.net(x[start:start + batch_size])]
            out += [[s[b] for s in scales] for b in range(len(scales[0]))]
    return out


def detect_frames(state: DetectorState, frames, indices: Sequence[int] | None = None) -> list[FrameDetections]:
    """Decode, suppress and map boxes back to each frame's own pixel coordinates."""
    frames = list(frames)
    cfg = state.config
    raws = raw_predictions(state, frames)
    indices = list(range(len(frames))) if indices is None else list(indices)
    results = []
    for k, (raw, frame) in enumerate(zip(raws, frames)):
        h, w = np.shape(frame)[:2]
        scale, px, py = _geometry(h, w, cfg.input_size)
        boxes = []
        for b in nms(decode_predictions(raw, cfg), cfg.nms_iou_threshold):
            b = clamp_box(_from_letterbox(b, scale, px, py), w, h)
            if b is not None:
                boxes.append(b)
        results.append(FrameDetections(indices[k], boxes))
    return results


def _geometry(h: int, w: int, size: int):
    """Letterbox scale and padding for an ``h x w`` frame."""
    scale = min(size / h, size / w)
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    return scale, (size - nw) // 2, (size - nh) // 2


# ------------------------------------------------------------------ training


def _targets(labels, geoms, cfg: DetectorConfig):
    """Per-scale target tensors ``B x S x S x 5`` and positive masks ``B x S x S``."""
    tgt = [np.zeros((len(labels), g, g, 5), dtype=np.float32) for g in cfg.grids]
    pos = [np.zeros((len(labels), g, g), dtype=bool) for g in cfg.grids]
    level = {s: k for k, s in enumerate(cfg.strides)}
    for b, (boxes, (scale, px, py, w, h)) in enumerate(zip(labels, geoms)):
        for gt in boxes:
            box = BoundingBox.from_ground_truth(gt, w, h) if isinstance(gt, GroundTruthBox) else gt
            box = _to_letterbox(box, scale, px, py)
            stride, i, j, vec = encode_box(box, cfg)
            k = level[stride]
            tgt[k][b, i, j] = vec
            pos[k][b, i, j] = True
    return [torch.from_numpy(t) for t in tgt], [torch.from_numpy(p) for p in pos]


def _cell_boxes(pred_or_tgt, stride: int, input_size: int):
    """x1, y1, x2, y2 tensors for every cell of one scale."""
    g = pred_or_tgt.shape[1]
    jj = torch.arange(g, dtype=pred_or_tgt.dtype).view(1, 1, g)
    ii = torch.arange(g, dtype=pred_or_tgt.dtype).view(1, g, 1)
    cx = (jj + pred_or_tgt[..., 0]) * stride
    cy = (ii + pred_or_tgt[..., 1]) * stride
    w = pred_or_tgt[..., 2] * input_size
    h = pred_or_tgt[..., 3] * input_size
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def giou_loss(p, t, eps: float = 1e-9):
    """``1 - GIoU`` between corner-form boxes ``p`` and ``t`` (tuples of tensors)."""
    px1, py1, px2, py2 = p
    tx1, ty1, tx2, ty2 = t
    iw = (torch.minimum(px2, tx2) - torch.maximum(px1, tx1)).clamp(min=0)
    ih = (torch.minimum(py2, ty2) - torch.maximum(py1, ty1)).clamp(min=0)
    inter = iw * ih
    union = (px2 - px1) * (py2 - py1) + (tx2 - tx1) * (ty2 - ty1) - inter
    iou_ = inter / (union + eps)
    cw = torch.maximum(px2, tx2) - torch.minimum(px1, tx1)
    ch = torch.maximum(py2, ty2) - torch.minimum(py1, ty1)
    hull = cw * ch + eps
    return 1 - (iou_ - (hull - union) / hull)


def detection_loss(preds, targets, positives, cfg: DetectorConfig, box_weight: float = 5.0):
    """Box regression (GIoU) on responsible cells plus balanced objectness BCE.

    There is a single object class, so no separate class term is needed: the
    objectness score doubles as the Gun probability.
    """
    obj_pos, obj_neg, n_pos, n_neg = 0.0, 0.0, 0, 0
    box = 0.0
    for pred, tgt, pos, stride in zip(preds, targets, positives, cfg.strides):
        bce = F.binary_cross_entropy(pred[..., 4].clamp(1e-7, 1 - 1e-7), pos.to(pred.dtype), reduction="none")
        obj_pos = obj_pos + bce[pos].sum()
        obj_neg = obj_neg + bce[~pos].sum()
        n_pos += int(pos.sum())
        n_neg += int((~pos).sum())
        if pos.any():
            pb = [c[pos] for c in _cell_boxes(pred, stride, cfg.input_size)]
            tb = [c[pos] for c in _cell_boxes(tgt, stride, cfg.input_size)]
            box = box + giou_loss(pb, tb).sum()
    loss = obj_neg / max(n_neg, 1)
    if n_pos:
        loss = loss + obj_pos / n_pos + box_weight * box / n_pos
    return loss


def finetune_detector(state: DetectorState, images, labels, cfg: TrainConfig | None = None,
                      val_images=None, val_labels=None) -> DetectorState:
    """Fine-tune on labelled images; ``labels[k]`` lists boxes of ``images[k]``.

    Boxes may be ``GroundTruthBox`` (normalized) or pixel ``BoundingBox``.
    Without a validation set, early stopping watches the training loss.
    """
    cfg = cfg or TrainConfig()
    images, labels = list(images), list(labels)
    if len(images) != len(labels):
        raise ValidationError(f"{len(images)} images but {len(labels)} label lists")
    if not images:
        raise ValidationError("detector training set is empty")
    if val_images is None:
        val_images, val_labels = images, labels
    val_images, val_labels = list(val_images), list(val_labels)
    if len(val_images) != len(val_labels):
        raise ValidationError("validation image and label counts differ")

    target = copy.deepcopy(state)
    dcfg = target.config
    x, geoms = _prepare(images, dcfg, target.in_channels)
    tgt, pos = _targets(labels, geoms, dcfg)
    vx, vgeoms = _prepare(val_images, dcfg, target.in_channels)
    vtgt, vpos = _targets(val_labels, vgeoms, dcfg)

    def batches(epoch):
        rng = np.random.default_rng([cfg.seed, epoch])
        for idx in minibatches(len(x), cfg.batch_size, rng):
            idx = torch.from_numpy(idx)
            yield x[idx], [t[idx] for t in tgt], [p[idx] for p in pos]

    def batch_loss(module, batch):
        bx, bt, bp = batch
        return detection_loss(module(bx), bt, bp, dcfg), 0, len(bx)

    def evaluate(module):
        return float(detection_loss(module(vx), vtgt, vpos, dcfg)), 0.0

    with seeded(cfg.seed):
        history, _ = fit(target.net, dict(target.net.named_parameters()), batches, batch_loss, evaluate, cfg)
    target.history = history
    target.seed = cfg.seed
    return target


def box_recall(state: DetectorState, frames, truths, iou_threshold: float = 0.5) -> float:
    """Fraction of ground-truth boxes covered by some detection with IoU >= threshold."""
    dets = detect_frames(state, frames)
    hit = total = 0
    for fd, frame, boxes in zip(dets, frames, truths):
        h, w = np.asarray(frame).shape[:2]
        for gt in boxes:
            g = BoundingBox.from_ground_truth(gt, w, h) if isinstance(gt, GroundTruthBox) else gt
            total += 1
            hit += any(iou(g, d) >= iou_threshold for d in fd.boxes)
    return hit / total if total else 1.0


# -------------------------------------------------------------- checkpoints


def save_detector(state: DetectorState, path, extra: dict | None = None) -> Path:
    path = Path(path).with_suffix("")
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path.with_suffix(".npz"), **state.parameters())
    sidecar = {
        "architecture": state.architecture,
        "config": state.config.to_dict(),
        "in_channels": state.in_channels,
        "width": state.width,
        "seed": state.seed,
        "history": state.history.to_dict() if state.history else None,
    }
    sidecar.update(extra or {})
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path.with_suffix(".npz")


def load_detector(path) -> DetectorState:
    path = Path(path).with_suffix("")
    try:
        meta = json.loads(path.with_suffix(".json").read_text())
        data = np.load(path.with_suffix(".npz"))
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot read detector checkpoint {path}: {exc}") from exc
    state = build_detector(DetectorConfig(**meta["config"]), meta.get("seed", 0),
                           meta.get("in_channels", 3), meta.get("width", 32))
    try:
        state.net.load_state_dict({k: torch.from_numpy(data[k]) for k in data.files}, strict=True)
    except RuntimeError as exc:
        raise LoadError(str(exc)) from exc
    finally:
        data.close()
    state.history = TrainingHistory.from_dict(meta.get("history"))
    return state


def detections_to_json(detections: Sequence[FrameDetections]) -> list[dict]:
    return [fd.to_dict() for fd in detections]

"""Corpus discovery, stratified splits, frame sampling and box label files."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from .errors import (
    ConfigError,
    EmptyDatasetError,
    IngestError,
    LayoutError,
    ParseError,
    ValidationError,
)

GUN, NOGUN = 1, 0

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
VIDEO_EXTENSIONS = {".mp4", ".avi", ".mov", ".mkv", ".webm", ".mpg", ".mpeg"}

_POSITIVE_NAMES = {"gun", "guns", "weapon", "firearm", "positive"}
_NEGATIVE_NAMES = {"nogun", "noguns", "noweapon", "nofirearm", "normal", "negative"}


def class_label(folder_name: str) -> int:
    """Map a class folder name (``Gun``, ``No-Gun``, ``no_gun`` ...) to 1/0."""
    key = re.sub(r"[^a-z]", "", folder_name.lower())
    if key in _POSITIVE_NAMES:
        return GUN
    if key in _NEGATIVE_NAMES:
        return NOGUN
    raise LayoutError(f"cannot map class folder {folder_name!r} to Gun/NoGun")


@dataclass
class ImageDatasetIndex:
    entries: list[tuple[Path, int]]
    class_counts: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.class_counts:
            self.class_counts = dict(Counter(label for _, label in self.entries))
        _check_index(self)

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self) -> list[int]:
        return [label for _, label in self.entries]


@dataclass
class VideoDatasetIndex(ImageDatasetIndex):
    """Entries point at a video file or at a directory of numbered frames."""


def _check_index(index: ImageDatasetIndex) -> None:
    if any(label not in (0, 1) for _, label in index.entries):
        raise ValidationError("labels must be 0 or 1")
    if sum(index.class_counts.values()) != len(index.entries):
        raise ValidationError("class_counts does not sum to the number of entries")
    if len({str(p) for p, _ in index.entries}) != len(index.entries):
        raise ValidationError("duplicate paths in index")


def _is_frame_dir(path: Path) -> bool:
    return path.is_dir() and any(
        p.suffix.lower() in IMAGE_EXTENSIONS for p in path.iterdir()
    )


def discover_dataset(root, kind: str = "image") -> ImageDatasetIndex:
    """Enumerate ``<root>/<ClassName>/<file>`` into a labelled index.

    For ``kind="video"`` a media entry is either a video file or a directory of
    frame images. Ordering is lexicographic by class folder then file name.
    """
    if kind not in ("image", "video"):
        raise ConfigError(f"unknown dataset kind {kind!r}")
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"dataset root {root} does not exist")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) != 2:
        raise LayoutError(
            f"expected exactly two class folders under {root}, found {len(class_dirs)}"
        )
    labels = [class_label(d.name) for d in class_dirs]
    if sorted(labels) != [0, 1]:
        raise LayoutError("class folders must be one Gun and one NoGun folder")

    entries = []
    for class_dir, label in zip(class_dirs, labels):
        for item in sorted(class_dir.iterdir()):
            if kind == "image":
                ok = item.is_file() and item.suffix.lower() in IMAGE_EXTENSIONS
            else:
                ok = (item.is_file() and item.suffix.lower() in VIDEO_EXTENSIONS) or (
                    _is_frame_dir(item)
                )
            if ok:
                entries.append((item, label))
    if not entries:
        raise EmptyDatasetError(f"no media files found under {root}")
    cls = ImageDatasetIndex if kind == "image" else VideoDatasetIndex
    return cls(entries)


@dataclass
class SplitAssignment:
    train: list[int]
    val: list[int]
    test: list[int]
    seed: int
    ratios: tuple[float, float, float]

    def to_manifest(self, index: ImageDatasetIndex) -> dict:
        def paths(ids):
            return [str(index.entries[i][0]) for i in ids]

        return {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "train": paths(self.train),
            "val": paths(self.val),
            "test": paths(self.test),
        }


def split_dataset(index, ratios=(0.7, 0.15, 0.15), seed: int = 0) -> SplitAssignment:
    """Stratified split with per-class floor cuts.

    Each class is shuffled with ``seed`` and cut at ``floor(r_train*n)`` and
    ``floor((r_train+r_val)*n)``; the remainder goes to test.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValidationError("ratios must be three non-negative fractions")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios must sum to 1, got {sum(ratios)!r}")
    labels = index.labels if hasattr(index, "labels") else list(index)
    if not labels:
        raise ValidationError("cannot split an empty index")

    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for label in sorted(set(labels)):
        members = np.array([i for i, y in enumerate(labels) if y == label])
        members = members[rng.permutation(len(members))]
        n = len(members)
        # small epsilon so that e.g. 0.7*100 does not floor to 69
        cut1 = math.floor(ratios[0] * n + 1e-9)
        cut2 = math.floor((ratios[0] + ratios[1]) * n + 1e-9)
        train += members[:cut1].tolist()
        val += members[cut1:cut2].tolist()
        test += members[cut2:].tolist()
    return SplitAssignment(sorted(train), sorted(val), sorted(test), seed, ratios)


def write_manifest(path, assignment: SplitAssignment, index, extra=None) -> None:
    payload = assignment.to_manifest(index)
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------- frames


@dataclass
class VideoSample:
    frames: np.ndarray  # T x H x W x C, float32 in [0, 1]
    label: int
    source_id: str = ""
    indices: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or len(self.frames) < 1:
            raise ValidationError("frames must be a non-empty T x H x W x C array")
        if self.label not in (0, 1):
            raise ValidationError("label must be 0 or 1")

    @property
    def num_frames(self) -> int:
        return len(self.frames)


def validate_frame(frame) -> np.ndarray:
    """Check the FrameTensor contract: H x W x C reals in [0, 1]."""
    frame = np.asarray(frame, dtype=np.float32)
    if frame.ndim != 3 or min(frame.shape) < 1:
        raise ValidationError(f"frame must be H x W x C, got shape {frame.shape}")
    if frame.size and (frame.min() < 0 or frame.max() > 1 or not np.isfinite(frame).all()):
        raise ValidationError("frame values must lie in [0, 1]")
    return frame


def sample_indices(num_source: int, target_count: int) -> list[int]:
    """Uniformly spaced indices ``round(k*(F-1)/(T-1))`` with half-up rounding."""
    if num_source < 1 or target_count < 1:
        raise ValidationError("need at least one source frame and T >= 1")
    if target_count == 1:
        return [0]
    step = (num_source - 1) / (target_count - 1)
    return [min(num_source - 1, int(math.floor(k * step + 0.5))) for k in range(target_count)]


def _frame_files(directory: Path) -> list[Path]:
    files = [p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS]

    def key(p):
        nums = re.findall(r"\d+", p.stem)
        return (int(nums[-1]) if nums else -1, p.name)

    return sorted(files, key=key)


def read_image(path) -> np.ndarray:
    """Read an image file as RGB float32 in [0, 1]."""
    raw = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if raw is None:
        raise IngestError(f"cannot decode image {path}")
    return cv2.cvtColor(raw, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0


def write_image(path, frame) -> None:
    frame = np.clip(np.asarray(frame), 0, 1)
    if frame.ndim == 3 and frame.shape[2] == 1:
        frame = frame[..., 0]
    raw = np.round(frame * 255).astype(np.uint8)
    if raw.ndim == 3:
        raw = cv2.cvtColor(raw, cv2.COLOR_RGB2BGR)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), raw):
        raise IngestError(f"cannot write image {path}")


def resize_frame(frame: np.ndarray, size) -> np.ndarray:
    h, w = size
    if frame.shape[:2] == (h, w):
        return frame.astype(np.float32)
    out = cv2.resize(frame, (w, h), interpolation=cv2.INTER_AREA)
    if out.ndim == 2:
        out = out[..., None]
    return np.clip(out, 0, 1).astype(np.float32)


def _source_frame_count(source) -> tuple[int, object]:
    if isinstance(source, np.ndarray):
        return len(source), source
    path = Path(source)
    if path.is_dir():
        files = _frame_files(path)
        if not files:
            raise IngestError(f"no frames in {path}")
        return len(files), files
    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise IngestError(f"cannot open video {path}")
    frames = []
    while True:
        ok, raw = cap.read()
        if not ok:
            break
        frames.append(cv2.cvtColor(raw, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0)
    cap.release()
    if not frames:
        raise IngestError(f"video {path} has no decodable frames")
    return len(frames), frames


def sample_frames(source, target_count: int, target_size, label: int = 0, source_id=None) -> VideoSample:
    """Sample ``target_count`` frames at uniform indices, resized and in [0, 1].

    ``source`` may be a video file, a directory of numbered frame images, or an
    in-memory ``F x H x W x C`` array already scaled to [0, 1].
    """
    if target_count < 1:
        raise ValidationError("target_count must be >= 1")
    try:
        count, frames = _source_frame_count(source)
    except (OSError, cv2.error) as exc:
        raise IngestError(f"cannot read {source}: {exc}") from exc
    if count < 1:
        raise IngestError("source has no frames")
    idx = sample_indices(count, target_count)
    out = []
    for i in idx:
        frame = frames[i]
        if isinstance(frame, Path):
            frame = read_image(frame)
        out.append(resize_frame(np.asarray(frame, dtype=np.float32), target_size))
    if source_id is None:
        source_id = "array" if isinstance(source, np.ndarray) else Path(source).stem
    return VideoSample(np.stack(out), label, str(source_id), idx)


def frame_label_paths(source) -> list[Path | None]:
    """Per-frame label files (same stem, ``.txt``) for a frame-directory video."""
    path = Path(source)
    if not path.is_dir():
        return []
    out = []
    for f in _frame_files(path):
        txt = f.with_suffix(".txt")
        out.append(txt if txt.exists() else None)
    return out


# --------------------------------------------------------------------- labels


@dataclass(frozen=True)
class GroundTruthBox:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.class_id != 0:
            raise ValidationError(f"class id must be 0 (Gun), got {self.class_id}")
        for name in ("cx", "cy", "w", "h"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0) or not math.isfinite(v):
                raise ValidationError(f"{name}={v} outside [0, 1]")
        if self.w <= 0 or self.h <= 0:
            raise ValidationError("box width and height must be positive")

    def to_pixels(self, width: int, height: int) -> tuple[float, float, float, float]:
        """Top-left (x, y, w, h) in pixels, clamped to the image."""
        x0 = max(0.0, (self.cx - self.w / 2) * width)
        y0 = max(0.0, (self.cy - self.h / 2) * height)
        x1 = min(float(width), (self.cx + self.w / 2) * width)
        y1 = min(float(height), (self.cy + self.h / 2) * height)
        return x0, y0, x1 - x0, y1 - y0

    @classmethod
    def from_pixels(cls, x, y, w, h, width, height) -> "GroundTruthBox":
        return cls(0, (x + w / 2) / width, (y + h / 2) / height, w / width, h / height)


def load_detection_labels(path) -> list[GroundTruthBox]:
    """Parse ``class cx cy w h`` lines (normalized centre format)."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot read label file {path}: {exc}") from exc
    boxes = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ParseError(f"expected 5 fields, got {len(parts)}", lineno)
        try:
            cls_f, cx, cy, w, h = (float(p) for p in parts)
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from exc
        if cls_f != int(cls_f):
            raise ParseError(f"class id {parts[0]!r} is not an integer", lineno)
        try:
            boxes.append(GroundTruthBox(int(cls_f), cx, cy, w, h))
        except ValidationError as exc:
            raise ValidationError(f"line {lineno}: {exc}") from exc
    return boxes


def write_detection_labels(path, boxes: Sequence[GroundTruthBox]) -> None:
    lines = [f"{b.class_id} {float(b.cx)!r} {float(b.cy)!r} {float(b.w)!r} {float(b.h)!r}" for b in boxes]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def discover_detection_corpus(root) -> tuple[list[Path], list[Path | None]]:
    """``<root>/images/*`` with labels at ``<root>/labels/<stem>.txt``.

    A missing label file means the image has no boxes.
    """
    root = Path(root)
    img_dir = root / "images"
    if not img_dir.is_dir():
        raise ConfigError(f"{img_dir} does not exist")
    images = sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not images:
        raise EmptyDatasetError(f"no images under {img_dir}")
    labels = []
    for img in images:
        txt = root / "labels" / (img.stem + ".txt")
        labels.append(txt if txt.exists() else None)
    return images, labels

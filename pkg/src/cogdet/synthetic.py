"""Synthetic "bright square" corpora for desk-scale experiments.

Gun frames contain a bright near-white square; No-Gun frames contain only a
dim distractor square on the same noisy background. Gun videos move the
bright square along a straight line.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import GroundTruthBox, VideoSample, write_detection_labels, write_image


@dataclass
class SyntheticSpec:
    size: int = 32
    channels: int = 3
    square_min: int = 5
    square_max: int = 8
    noise_max: float = 0.35
    distractor: bool = True


def _background(rng, spec: SyntheticSpec):
    return rng.uniform(0.0, spec.noise_max, (spec.size, spec.size, spec.channels)).astype(np.float32)


def _paint(frame, x, y, side, value):
    frame[y:y + side, x:x + side] = value


def make_image(rng: np.random.Generator, gun: bool, spec: SyntheticSpec | None = None):
    """One frame and its pixel box ``(x, y, w, h)`` (``None`` for No-Gun)."""
    spec = spec or SyntheticSpec()
    frame = _background(rng, spec)
    if spec.distractor:
        side = int(rng.integers(spec.square_min, spec.square_max + 1))
        x, y = rng.integers(0, spec.size - side + 1, 2)
        _paint(frame, x, y, side, rng.uniform(0.4, 0.5))
    box = None
    if gun:
        side = int(rng.integers(spec.square_min, spec.square_max + 1))
        x, y = (int(v) for v in rng.integers(0, spec.size - side + 1, 2))
        _paint(frame, x, y, side, rng.uniform(0.9, 1.0))
        box = (float(x), float(y), float(side), float(side))
    return frame, box


def make_images(n: int, seed: int, spec: SyntheticSpec | None = None):
    """Balanced labelled image set: ``(frames, labels, boxes)``."""
    rng = np.random.default_rng(seed)
    frames, labels, boxes = [], [], []
    for i in range(n):
        gun = i % 2 == 0
        f, b = make_image(rng, gun, spec)
        frames.append(f)
        labels.append(int(gun))
        boxes.append([] if b is None else [GroundTruthBox.from_pixels(*b, f.shape[1], f.shape[0])])
    return np.stack(frames), labels, boxes


def make_video(rng: np.random.Generator, gun: bool, num_frames: int = 8, spec: SyntheticSpec | None = None):
    """Frames ``T x H x W x C`` and per-frame label boxes (normalized)."""
    spec = spec or SyntheticSpec()
    s = spec.size
    side = int(rng.integers(spec.square_min, spec.square_max + 1))
    start = rng.integers(0, s - side + 1, 2).astype(float)
    end = rng.integers(0, s - side + 1, 2).astype(float)
    dside = int(rng.integers(spec.square_min, spec.square_max + 1))
    dpos = rng.integers(0, s - dside + 1, 2)
    bright = rng.uniform(0.9, 1.0)
    frames, boxes = [], []
    for t in range(num_frames):
        frame = _background(rng, spec)
        if spec.distractor:
            _paint(frame, dpos[0], dpos[1], dside, 0.45)
        frame_boxes = []
        if gun:
            a = t / max(num_frames - 1, 1)
            x, y = (int(round(v)) for v in (1 - a) * start + a * end)
            _paint(frame, x, y, side, bright)
            frame_boxes.append(GroundTruthBox.from_pixels(x, y, side, side, s, s))
        frames.append(frame)
        boxes.append(frame_boxes)
    return np.stack(frames), boxes


@dataclass
class SyntheticVideo:
    sample: VideoSample
    boxes: list = field(default_factory=list)  # per frame, list of GroundTruthBox


def make_videos(n: int, seed: int, num_frames: int = 8, spec: SyntheticSpec | None = None,
                prefix: str = "vid", gun_fraction: float = 0.5) -> list[SyntheticVideo]:
    rng = np.random.default_rng(seed)
    n_gun = int(round(n * gun_fraction))
    out = []
    for i in range(n):
        gun = i < n_gun
        frames, boxes = make_video(rng, gun, num_frames, spec)
        sample = VideoSample(frames, int(gun), f"{prefix}{i:04d}", list(range(num_frames)))
        out.append(SyntheticVideo(sample, boxes))
    return out


def write_corpus(root, n_images=240, n_videos=80, n_detection=240, num_frames=8, seed=0,
                 spec: SyntheticSpec | None = None) -> dict:
    """Write a class-folder corpus usable by the CLI.

    Layout::

        root/images/{Gun,NoGun}/img_XXXX.png
        root/videos/{Gun,NoGun}/vid_XXXX/frame_XXX.png (+ frame_XXX.txt labels)
        root/detection/images/det_XXXX.png, root/detection/labels/det_XXXX.txt
    """
    root = Path(root)
    frames, labels, _ = make_images(n_images, seed, spec)
    for k, (f, y) in enumerate(zip(frames, labels)):
        d = root / "images" / ("Gun" if y else "NoGun")
        d.mkdir(parents=True, exist_ok=True)
        write_image(d / f"img_{k:04d}.png", f)

    for v in make_videos(n_videos, seed + 1, num_frames, spec, prefix="vid_"):
        d = root / "videos" / ("Gun" if v.sample.label else "NoGun") / v.sample.source_id
        d.mkdir(parents=True, exist_ok=True)
        for t, (f, boxes) in enumerate(zip(v.sample.frames, v.boxes)):
            write_image(d / f"frame_{t:03d}.png", f)
            write_detection_labels(d / f"frame_{t:03d}.txt", boxes)

    det_frames, _, det_boxes = make_images(n_detection, seed + 2, spec)
    (root / "detection" / "images").mkdir(parents=True, exist_ok=True)
    (root / "detection" / "labels").mkdir(parents=True, exist_ok=True)
    for k, (f, boxes) in enumerate(zip(det_frames, det_boxes)):
        write_image(root / "detection" / "images" / f"det_{k:04d}.png", f)
        write_detection_labels(root / "detection" / "labels" / f"det_{k:04d}.txt", boxes)
    return {"images": str(root / "images"), "videos": str(root / "videos"),
            "detection": str(root / "detection")}

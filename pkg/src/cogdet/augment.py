"""Seeded, label-preserving image augmentation (flip, rotation, zoom)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import ValidationError

_FILL_MODES = {"reflect": "reflect", "constant-zero": "constant"}


@dataclass(frozen=True)
class AugmentPolicy:
    horizontal_flip_prob: float = 0.5
    rotation_max_degrees: float = 15.0
    zoom_range: tuple[float, float] = (0.85, 1.15)
    fill_mode: str = "reflect"

    def __post_init__(self):
        object.__setattr__(self, "zoom_range", tuple(float(z) for z in self.zoom_range))
        if not 0.0 <= self.horizontal_flip_prob <= 1.0:
            raise ValidationError("horizontal_flip_prob must be in [0, 1]")
        if not 0.0 <= self.rotation_max_degrees <= 180.0:
            raise ValidationError("rotation_max_degrees must be in [0, 180]")
        lo, hi = self.zoom_range
        if not (0.0 < lo <= 1.0 <= hi):
            raise ValidationError("zoom_range must satisfy 0 < lo <= 1 <= hi")
        if self.fill_mode not in _FILL_MODES:
            raise ValidationError(f"fill_mode must be one of {sorted(_FILL_MODES)}")

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(0.0, 0.0, (1.0, 1.0))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["zoom_range"] = list(self.zoom_range)
        return d


def hflip(frame: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(frame[:, ::-1])


def rotate_zoom(frame: np.ndarray, angle_deg: float, zoom: float, fill_mode="reflect") -> np.ndarray:
    """Rotate about the image centre and scale by ``zoom`` (bilinear)."""
    if angle_deg == 0.0 and zoom == 1.0:
        return frame.copy()
    h, w = frame.shape[:2]
    theta = math.radians(angle_deg)
    # output pixel -> input pixel: inverse rotation then inverse zoom
    c, s = math.cos(theta), math.sin(theta)
    matrix = np.array([[c, s], [-s, c]]) / zoom
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - matrix @ centre
    out = np.empty_like(frame)
    for ch in range(frame.shape[2]):
        out[..., ch] = ndimage.affine_transform(
            frame[..., ch], matrix, offset=offset, order=1,
            mode=_FILL_MODES[fill_mode], cval=0.0,
        )
    return out


def augment_image(frame, policy: AugmentPolicy, seed: int) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float32)
    rng = np.random.default_rng(seed)
    flip = rng.random() < policy.horizontal_flip_prob
    angle = rng.uniform(-policy.rotation_max_degrees, policy.rotation_max_degrees)
    zoom = rng.uniform(*policy.zoom_range)
    out = hflip(frame) if flip else frame.copy()
    out = rotate_zoom(out, float(angle), float(zoom), policy.fill_mode)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment_batch(frames, labels, policy: AugmentPolicy, seed: int):
    """Augment image ``i`` with seed ``seed + i``; labels pass through."""
    if len(frames) != len(labels):
        raise ValidationError(f"{len(frames)} frames but {len(labels)} labels")
    out = [augment_image(f, policy, seed + i) for i, f in enumerate(frames)]
    if isinstance(frames, np.ndarray):
        out = np.stack(out) if out else frames.copy()
    return out, list(labels)

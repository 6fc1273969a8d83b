"""Gradient-weighted class activation maps over the backbone's final conv layer."""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
import torch
from matplotlib import colormaps

from .backbone import BackboneState, to_tensor
from .dataset import validate_frame
from .errors import CapabilityError, ValidationError


@dataclass
class ActivationCapture:
    activations: np.ndarray  # K x H x W
    gradients: np.ndarray    # d(class score)/d(activations), K x H x W
    class_id: int

    def __post_init__(self):
        self.activations = np.asarray(self.activations, dtype=np.float64)
        self.gradients = np.asarray(self.gradients, dtype=np.float64)
        if self.activations.shape != self.gradients.shape or self.activations.ndim != 3:
            raise ValidationError(
                f"activation {self.activations.shape} and gradient {self.gradients.shape} "
                "must be identical K x H x W arrays"
            )


@dataclass
class Heatmap:
    values: np.ndarray
    normalized_values: np.ndarray


def channel_weights(gradients: np.ndarray) -> np.ndarray:
    """Per-channel spatial mean of the gradients."""
    return np.asarray(gradients, dtype=np.float64).mean(axis=(1, 2))


def gradcam_map(cap: ActivationCapture) -> Heatmap:
    alpha = channel_weights(cap.gradients)
    values = np.maximum((alpha[:, None, None] * cap.activations).sum(axis=0), 0.0)
    peak = values.max()
    normalized = values / peak if peak > 0 else np.zeros_like(values)
    return Heatmap(values, normalized)


def _backbone_of(model) -> BackboneState:
    backbone = getattr(model, "backbone", model)
    net = getattr(backbone, "net", None)
    if net is None or not hasattr(net, "feature_maps") or not any(
        isinstance(m, torch.nn.Conv2d) for m in net.modules()
    ):
        raise CapabilityError("model has no convolutional layer to explain")
    return backbone


def capture_activations(model, frame, class_id: int = 1) -> ActivationCapture:
    """Record final conv activations and the gradient of the class logit w.r.t. them.

    For a video classifier the frame goes through the backbone path only.
    """
    backbone = _backbone_of(model)
    if class_id not in (0, 1):
        raise ValidationError(f"class id must be 0 or 1, got {class_id}")
    frame = validate_frame(frame)
    net = backbone.net
    net.eval()
    x = to_tensor(frame, backbone.in_channels).to(next(net.parameters()).dtype)
    with torch.enable_grad():
        maps = net.feature_maps(x).detach().requires_grad_(True)
        score = net.head(maps)[0, class_id]
        (grad,) = torch.autograd.grad(score, maps)
    return ActivationCapture(maps[0].detach().numpy(), grad[0].numpy(), class_id)


def class_score_from_maps(model, maps: np.ndarray, class_id: int) -> float:
    """Class logit as a function of the final activation maps (used for checks)."""
    net = _backbone_of(model).net
    with torch.no_grad():
        t = torch.as_tensor(maps[None], dtype=next(net.parameters()).dtype)
        return float(net.head(t)[0, class_id])


def upsample(values: np.ndarray, height: int, width: int) -> np.ndarray:
    return cv2.resize(np.asarray(values, dtype=np.float32), (width, height), interpolation=cv2.INTER_LINEAR)


def overlay(hm: Heatmap, frame, alpha: float = 0.5, colormap: str = "jet") -> np.ndarray:
    """Blend a colourised heatmap onto the frame.

    The per-pixel blend weight is ``alpha * heat``, so zero heat leaves the
    frame untouched. Single-channel frames are promoted to RGB.
    """
    frame = validate_frame(frame)
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError("alpha must be in [0, 1]")
    h, w = frame.shape[:2]
    heat = np.clip(upsample(hm.normalized_values, h, w), 0.0, 1.0)[..., None]
    colors = colormaps[colormap](heat[..., 0])[..., :3].astype(np.float32)
    base = frame if frame.shape[2] == 3 else np.repeat(frame[..., :1], 3, axis=2)
    weight = alpha * heat
    return np.clip((1 - weight) * base + weight * colors, 0.0, 1.0).astype(np.float32)


def explain_frame(model, frame, class_id: int = 1, alpha: float = 0.5):
    cap = capture_activations(model, frame, class_id)
    hm = gradcam_map(cap)
    return hm, overlay(hm, frame, alpha)

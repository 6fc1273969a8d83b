"""Frame-level feature extractor trained by transfer learning.

A backbone is a convolutional stack (``features``) whose final activation maps
are global-average pooled into a ``d``-dimensional frame embedding, plus a
two-way linear layer used while fine-tuning on still gun images.
Fine-tuning starts from a copy of the source parameters and records the
accumulated update, so the target parameters are exactly the source
parameters plus that update.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .augment import AugmentPolicy, augment_batch
from .errors import LoadError, ValidationError
from .training import TrainConfig, TrainingHistory, fit, minibatches, seeded


class FrameNet(nn.Module):
    def __init__(self, features: nn.Module, feature_dim: int, in_channels: int = 3):
        super().__init__()
        self.features = features
        self.classifier = nn.Linear(feature_dim, 2)
        self.feature_dim = feature_dim
        self.in_channels = in_channels

    def feature_maps(self, x):
        return self.features(x)

    def embed(self, x):
        return self.feature_maps(x).mean(dim=(2, 3))

    def head(self, maps):
        """Logits from final activation maps."""
        return self.classifier(maps.mean(dim=(2, 3)))

    def forward(self, x):
        return self.head(self.feature_maps(x))


def _small_conv(in_channels=3, widths=(8, 16, 32)):
    layers, prev = [], in_channels
    for i, w in enumerate(widths):
        layers += [nn.Conv2d(prev, w, 3, stride=1 if i == 0 else 2, padding=1), nn.ReLU()]
        prev = w
    return nn.Sequential(*layers), prev


def _torchvision(name):
    def build(in_channels=3):
        import torchvision

        if in_channels != 3:
            raise ValidationError(f"{name} expects 3 input channels")
        model = getattr(torchvision.models, name)(weights=None)
        if name.startswith("resnet"):
            feats = nn.Sequential(
                model.conv1, model.bn1, model.relu, model.maxpool,
                model.layer1, model.layer2, model.layer3, model.layer4,
            )
            dim = model.fc.in_features
        elif name.startswith("vgg"):
            feats = model.features[:-1]  # drop the trailing max-pool
            dim = 512
        else:
            feats = model.features
            dim = feats[-1].out_channels
        return feats, dim

    return build


ARCHITECTURES = {
    "small-conv": _small_conv,
    "resnet18": _torchvision("resnet18"),
    "vgg11": _torchvision("vgg11"),
    "mobilenet_v3_small": _torchvision("mobilenet_v3_small"),
}


def build_network(architecture: str, in_channels: int = 3, **kwargs) -> FrameNet:
    try:
        builder = ARCHITECTURES[architecture]
    except KeyError:
        raise ValidationError(f"unknown backbone architecture {architecture!r}") from None
    feats, dim = builder(in_channels=in_channels, **kwargs)
    return FrameNet(feats, dim, in_channels)


@dataclass
class BackboneState:
    architecture: str
    net: FrameNet
    frozen_prefix: frozenset = frozenset()
    seed: int = 0
    arch_kwargs: dict = field(default_factory=dict)
    history: TrainingHistory | None = None
    updates: dict | None = None  # accumulated fine-tuning update per parameter

    def __post_init__(self):
        self.frozen_prefix = frozenset(self.frozen_prefix)

    @property
    def feature_dim(self) -> int:
        return self.net.feature_dim

    @property
    def in_channels(self) -> int:
        return self.net.in_channels

    def parameters(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.net.state_dict().items()}

    def is_frozen(self, name: str) -> bool:
        return any(name.startswith(p) for p in self.frozen_prefix)

    def size_bytes(self) -> int:
        return sum(v.numel() * v.element_size() for v in self.net.state_dict().values())


def build_backbone(architecture="small-conv", seed=0, in_channels=3, frozen_prefix=(), **kwargs) -> BackboneState:
    with seeded(seed):
        net = build_network(architecture, in_channels, **kwargs)
    net.eval()
    return BackboneState(architecture, net, frozenset(frozen_prefix), seed, dict(kwargs))


def init_from_pretrained(source: BackboneState, frozen_prefix=None) -> BackboneState:
    """Target parameters start as an exact copy of the source parameters."""
    net = build_network(source.architecture, source.in_channels, **source.arch_kwargs)
    try:
        net.load_state_dict(source.net.state_dict(), strict=True)
    except RuntimeError as exc:
        raise LoadError(f"source parameters do not fit {source.architecture}: {exc}") from exc
    net.eval()
    prefix = source.frozen_prefix if frozen_prefix is None else frozenset(frozen_prefix)
    return BackboneState(source.architecture, net, prefix, source.seed, dict(source.arch_kwargs))


def import_pretrained(path, architecture: str, in_channels: int = 3, **kwargs) -> BackboneState:
    """Load an external parameter file (``.npz`` or a torch state dict) into ``architecture``.

    Keys may be given either for the whole network or for the ``features``
    stack alone; the fine-tuning classifier is then freshly initialized.
    """
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as data:
            params = {k: torch.from_numpy(data[k]) for k in data.files}
    else:
        params = torch.load(path, map_location="cpu", weights_only=True)
    net = build_network(architecture, in_channels, **kwargs)
    if not any(k.startswith("features.") for k in params):
        params = {f"features.{k}": v for k, v in params.items()}
    missing, unexpected = net.load_state_dict(params, strict=False)
    missing = [k for k in missing if not k.startswith("classifier.")]
    if missing or unexpected:
        raise LoadError(f"parameter file {path} does not match {architecture}: "
                        f"missing={missing[:5]} unexpected={unexpected[:5]}")
    net.eval()
    return BackboneState(architecture, net, frozenset(), 0, dict(kwargs))


# ------------------------------------------------------------------ tensors


def to_tensor(frames, in_channels: int | None = None) -> torch.Tensor:
    """N x H x W x C array in [0, 1] -> float32 N x C x H x W tensor."""
    arr = np.asarray(frames, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValidationError(f"expected N x H x W x C frames, got shape {arr.shape}")
    if in_channels is not None and arr.shape[-1] != in_channels:
        raise ValidationError(f"expected {in_channels} channels, got {arr.shape[-1]}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def _stack_frames(frames) -> np.ndarray:
    if isinstance(frames, np.ndarray):
        return frames
    frames = list(frames)
    if not frames:
        raise ValidationError("frames must be non-empty")
    shapes = {np.shape(f) for f in frames}
    if len(shapes) != 1:
        raise ValidationError(f"frames have mixed shapes {sorted(shapes)}")
    return np.stack(frames)


def extract_features(state: BackboneState, frames, batch_size: int = 256) -> np.ndarray:
    """Per-frame pooled embeddings, shape T x d (inference mode)."""
    arr = _stack_frames(frames)
    if len(arr) == 0:
        raise ValidationError("frames must be non-empty")
    x = to_tensor(arr, state.in_channels)
    state.net.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            out.append(state.net.embed(x[start:start + batch_size]))
    return torch.cat(out).numpy()


# ---------------------------------------------------------------- training


def _image_loss(net, x, y):
    logits = net(x)
    loss = F.cross_entropy(logits, y)
    return loss, int((logits.argmax(1) == y).sum()), len(y)


def finetune_backbone(state: BackboneState, train, val, policy: AugmentPolicy | None = None,
                      cfg: TrainConfig | None = None):
    """Fine-tune on binary-labelled images with augmentation and early stopping.

    ``train`` and ``val`` are ``(frames, labels)`` pairs. Returns a new state
    (the input is left untouched) and the training history.
    """
    cfg = cfg or TrainConfig()
    policy = policy or AugmentPolicy()
    train_x, train_y = _stack_frames(train[0]), np.asarray(train[1], dtype=np.int64)
    val_x, val_y = _stack_frames(val[0]), np.asarray(val[1], dtype=np.int64)
    if len(train_x) == 0 or len(val_x) == 0:
        raise ValidationError("train and val image sets must be non-empty")
    if len(train_x) != len(train_y) or len(val_x) != len(val_y):
        raise ValidationError("image and label counts differ")
    if not set(np.unique(np.concatenate([train_y, val_y]))) <= {0, 1}:
        raise ValidationError("labels must be binary")

    target = init_from_pretrained(state)
    net = target.net
    trainable = {}
    for name, p in net.named_parameters():
        p.requires_grad_(not target.is_frozen(name))
        trainable[name] = p
    frozen_buffers = [k for k, _ in net.named_buffers() if target.is_frozen(k)]
    vx, vy = to_tensor(val_x, target.in_channels), torch.from_numpy(val_y)
    to_tensor(train_x[:1], target.in_channels)  # channel check before training

    def batches(epoch):
        aug, _ = augment_batch(train_x, train_y, policy, seed=cfg.seed * 1_000_003 + epoch * len(train_x))
        x = to_tensor(aug)
        y = torch.from_numpy(train_y)
        rng = np.random.default_rng([cfg.seed, epoch])
        for idx in minibatches(len(x), cfg.batch_size, rng):
            yield x[idx], y[idx]

    def batch_loss(module, batch):
        return _image_loss(module, *batch)

    def evaluate(module):
        loss, correct, n = _image_loss(module, vx, vy)
        return float(loss), correct / n

    with seeded(cfg.seed):
        history, updates = fit(net, trainable, batches, batch_loss, evaluate, cfg,
                               frozen_buffers=frozen_buffers, track_updates=True)
    for p in net.parameters():
        p.requires_grad_(True)
    target.history = history
    target.updates = {k: v.numpy() for k, v in updates.items()}
    target.seed = cfg.seed
    return target, history


def image_accuracy(state: BackboneState, frames, labels) -> float:
    x = to_tensor(_stack_frames(frames), state.in_channels)
    state.net.eval()
    with torch.no_grad():
        pred = state.net(x).argmax(1).numpy()
    return float((pred == np.asarray(labels)).mean())


# -------------------------------------------------------------- checkpoints


def _drop_none(d: dict) -> dict:
    return {k: v for k, v in d.items() if v is not None}


def save_backbone(state: BackboneState, path, extra: dict | None = None) -> Path:
    """Write ``<path>.npz`` (named tensors) and ``<path>.json`` (sidecar)."""
    path = Path(path).with_suffix("")
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path.with_suffix(".npz"), **state.parameters())
    sidecar = {
        "architecture": state.architecture,
        "arch_kwargs": state.arch_kwargs,
        "feature_dim": state.feature_dim,
        "in_channels": state.in_channels,
        "frozen_prefix": sorted(state.frozen_prefix),
        "seed": state.seed,
        "history": state.history.to_dict() if state.history else None,
    }
    sidecar.update(extra or {})
    path.with_suffix(".json").write_text(json.dumps(_drop_none(sidecar), indent=2, sort_keys=True))
    return path.with_suffix(".npz")


def load_backbone(path) -> BackboneState:
    path = Path(path).with_suffix("")
    try:
        meta = json.loads(path.with_suffix(".json").read_text())
        data = np.load(path.with_suffix(".npz"))
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot read backbone checkpoint {path}: {exc}") from exc
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in meta.get("arch_kwargs", {}).items()}
    net = build_network(meta["architecture"], meta.get("in_channels", 3), **kwargs)
    try:
        net.load_state_dict({k: torch.from_numpy(data[k]) for k in data.files}, strict=True)
    except RuntimeError as exc:
        raise LoadError(str(exc)) from exc
    finally:
        data.close()
    if net.feature_dim != meta["feature_dim"]:
        raise LoadError("feature_dim in sidecar does not match the architecture")
    net.eval()
    return BackboneState(meta["architecture"], net, frozenset(meta.get("frozen_prefix", [])),
                         meta.get("seed", 0), kwargs, TrainingHistory.from_dict(meta.get("history")))


def copy_state(state: BackboneState) -> BackboneState:
    return copy.deepcopy(state)

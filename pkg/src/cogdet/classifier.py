"""Stage-1 video classifier: time-distributed backbone features + sequence head."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import BackboneState, extract_features, load_backbone, save_backbone
from .dataset import VideoSample, sample_frames, sample_indices
from .errors import LoadError, ValidationError
from .training import TrainConfig, TrainingHistory, fit, minibatches, seeded

HEAD_KINDS = ("lstm", "gru", "transformer")


@dataclass(frozen=True)
class HeadConfig:
    kind: str = "gru"
    lstm_units: int = 512
    gru_units: int = 256
    recurrent_dropout: float = 0.5
    tf_heads: int = 4
    tf_model_dim: int = 256
    tf_ffn_dim: int = 512
    tf_dropout: float = 0.1
    positional_encoding: bool = True

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValidationError(f"head kind must be one of {HEAD_KINDS}")
        for name in ("lstm_units", "gru_units", "tf_heads", "tf_model_dim", "tf_ffn_dim"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        for name in ("recurrent_dropout", "tf_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValidationError(f"{name} must be in [0, 1)")
        if self.kind == "transformer" and self.tf_model_dim % self.tf_heads:
            raise ValidationError(
                f"tf_model_dim {self.tf_model_dim} is not divisible by tf_heads {self.tf_heads}"
            )

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_encoding(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float32)[:, None]
    freq = torch.exp(torch.arange(0, dim, 2, dtype=torch.float32) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq[: dim // 2])
    return pe


class SequenceHead(nn.Module):
    """Maps a B x T x d feature sequence to B x 2 logits."""

    def __init__(self, cfg: HeadConfig, feature_dim: int, max_len: int = 512):
        super().__init__()
        self.kind = cfg.kind
        if cfg.kind == "lstm":
            self.rnn = nn.LSTM(feature_dim, cfg.lstm_units, batch_first=True)
            out_dim, rate = cfg.lstm_units, cfg.recurrent_dropout
        elif cfg.kind == "gru":
            self.rnn = nn.GRU(feature_dim, cfg.gru_units, batch_first=True)
            out_dim, rate = cfg.gru_units, cfg.recurrent_dropout
        else:
            self.proj = nn.Linear(feature_dim, cfg.tf_model_dim)
            self.encoder = nn.TransformerEncoderLayer(
                cfg.tf_model_dim, cfg.tf_heads, cfg.tf_ffn_dim, cfg.tf_dropout, batch_first=True
            )
            self.use_pe = cfg.positional_encoding
            self.register_buffer("pe", sinusoidal_encoding(max_len, cfg.tf_model_dim), persistent=False)
            out_dim, rate = cfg.tf_model_dim, cfg.tf_dropout
        self.dropout = nn.Dropout(rate)
        self.out = nn.Linear(out_dim, 2)

    def embed(self, seq):
        if self.kind == "lstm":
            _, (h, _) = self.rnn(seq)
            return h[-1]
        if self.kind == "gru":
            _, h = self.rnn(seq)
            return h[-1]
        x = self.proj(seq)
        if self.use_pe:
            x = x + self.pe[: x.shape[1]].to(x.dtype)
        return self.encoder(x).mean(dim=1)

    def forward(self, seq):
        return self.out(self.dropout(self.embed(seq)))


@dataclass
class HeadState:
    config: HeadConfig
    feature_dim: int
    net: SequenceHead
    seed: int = 0

    def parameters(self) -> dict[str, np.ndarray]:
        return {k: v.detach().numpy().copy() for k, v in self.net.state_dict().items()}

    def size_bytes(self) -> int:
        return sum(v.numel() * v.element_size() for v in self.net.state_dict().values())


def build_head(cfg: HeadConfig, feature_dim: int, seed: int = 0) -> HeadState:
    if feature_dim < 1:
        raise ValidationError("feature_dim must be positive")
    with seeded(seed):
        net = SequenceHead(cfg, feature_dim)
    net.eval()
    return HeadState(cfg, feature_dim, net, seed)


@dataclass
class ClassifierModel:
    backbone: BackboneState
    head: HeadState
    decision_threshold: float = 0.5
    num_frames: int | None = None
    history: TrainingHistory | None = None

    def __post_init__(self):
        if self.backbone.feature_dim != self.head.feature_dim:
            raise ValidationError(
                f"backbone feature_dim {self.backbone.feature_dim} != head input {self.head.feature_dim}"
            )
        if not 0.0 < self.decision_threshold < 1.0:
            raise ValidationError("decision_threshold must lie in (0, 1)")

    @property
    def in_channels(self) -> int:
        return self.backbone.in_channels

    def size_bytes(self) -> int:
        return self.backbone.size_bytes() + self.head.size_bytes()


def _as_frames(sample, num_frames):
    frames = sample.frames if isinstance(sample, VideoSample) else np.asarray(sample, dtype=np.float32)
    if num_frames is not None and len(frames) != num_frames:
        frames = frames[sample_indices(len(frames), num_frames)]
    return frames


def sequence_features(model: ClassifierModel, videos) -> np.ndarray:
    """Backbone features for a batch of videos, shape N x T x d."""
    frames = [_as_frames(v, model.num_frames) for v in videos]
    lengths = {len(f) for f in frames}
    if len(lengths) != 1:
        raise ValidationError(f"videos have different frame counts {sorted(lengths)}; set num_frames")
    flat = np.concatenate(frames)
    feats = extract_features(model.backbone, flat)
    return feats.reshape(len(frames), lengths.pop(), -1)


def gun_probabilities(model: ClassifierModel, videos) -> np.ndarray:
    """Softmax output per video, columns (p_nogun, p_gun), in float64."""
    if len(videos) == 0:
        return np.zeros((0, 2))
    seq = torch.from_numpy(sequence_features(model, videos))
    model.head.net.eval()
    with torch.no_grad():
        logits = model.head.net(seq).double()
    return torch.softmax(logits, dim=1).numpy()


def decide(p_gun: float, threshold: float) -> int:
    """Gun iff ``p_gun >= threshold`` (ties go to Gun)."""
    return int(p_gun >= threshold)


def classify_video(model: ClassifierModel, sample) -> tuple[int, float]:
    """Return ``(label, p_gun)`` for one video (resampled to the trained T if needed)."""
    frames = _as_frames(sample, model.num_frames)
    if frames.ndim != 4 or frames.shape[-1] != model.in_channels:
        raise ValidationError(f"video frames have shape {frames.shape}")
    p = gun_probabilities(model, [frames])[0]
    p_gun = float(p[1])
    return decide(p_gun, model.decision_threshold), p_gun


def _video_arrays(videos):
    if not videos:
        raise ValidationError("video set must be non-empty")
    labels = np.array([v.label for v in videos], dtype=np.int64)
    return labels


def train_classifier(model: ClassifierModel, train_videos, val_videos, cfg: TrainConfig | None = None):
    """Train the sequence head on frozen backbone features under early stopping.

    Returns a new model; the input model is not modified.
    """
    cfg = cfg or TrainConfig()
    train_y = _video_arrays(train_videos)
    val_y = _video_arrays(val_videos)
    counts = {v.num_frames for v in list(train_videos) + list(val_videos)}
    num_frames = model.num_frames or (counts.pop() if len(counts) == 1 else None)
    if num_frames is None:
        raise ValidationError("videos must be frame-sampled to a common length T")
    trained = ClassifierModel(model.backbone, copy.deepcopy(model.head), model.decision_threshold, num_frames)
    train_x = torch.from_numpy(sequence_features(trained, train_videos))
    val_x = torch.from_numpy(sequence_features(trained, val_videos))
    ty, vy = torch.from_numpy(train_y), torch.from_numpy(val_y)
    net = trained.head.net

    def batches(epoch):
        rng = np.random.default_rng([cfg.seed, epoch])
        for idx in minibatches(len(train_x), cfg.batch_size, rng):
            yield train_x[idx], ty[idx]

    def batch_loss(module, batch):
        x, y = batch
        logits = module(x)
        return F.cross_entropy(logits, y), int((logits.argmax(1) == y).sum()), len(y)

    def evaluate(module):
        logits = module(val_x)
        acc = float((logits.argmax(1) == vy).float().mean())
        return float(F.cross_entropy(logits, vy)), acc

    with seeded(cfg.seed):
        history, _ = fit(net, dict(net.named_parameters()), batches, batch_loss, evaluate, cfg)
    trained.history = history
    return trained, history


def video_accuracy(model: ClassifierModel, videos) -> float:
    probs = gun_probabilities(model, videos)[:, 1]
    preds = (probs >= model.decision_threshold).astype(int)
    return float((preds == np.array([v.label for v in videos])).mean())


def resample_video(sample: VideoSample, num_frames: int) -> VideoSample:
    return sample_frames(sample.frames, num_frames, sample.frames.shape[1:3], sample.label, sample.source_id)


# -------------------------------------------------------------- checkpoints


def save_classifier(model: ClassifierModel, path, backbone_path=None, extra: dict | None = None) -> Path:
    """Backbone checkpoint + head tensors + sidecar ``{head config, threshold, T}``."""
    path = Path(path).with_suffix("")
    path.parent.mkdir(parents=True, exist_ok=True)
    if backbone_path is None:
        backbone_path = path.with_name(path.name + "_backbone")
        save_backbone(model.backbone, backbone_path, extra)
    np.savez(path.with_suffix(".npz"), **model.head.parameters())
    sidecar = {
        "head_config": model.head.config.to_dict(),
        "feature_dim": model.head.feature_dim,
        "head_seed": model.head.seed,
        "threshold": model.decision_threshold,
        "num_frames": model.num_frames,
        "backbone": str(Path(backbone_path).with_suffix("")),
        "history": model.history.to_dict() if model.history else None,
    }
    sidecar.update(extra or {})
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path.with_suffix(".npz")


def load_classifier(path) -> ClassifierModel:
    path = Path(path).with_suffix("")
    try:
        meta = json.loads(path.with_suffix(".json").read_text())
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot read classifier checkpoint {path}: {exc}") from exc
    backbone = load_backbone(meta["backbone"])
    head = build_head(HeadConfig(**meta["head_config"]), meta["feature_dim"], meta.get("head_seed", 0))
    with np.load(path.with_suffix(".npz")) as data:
        state = {k: torch.from_numpy(data[k]) for k in data.files}
    try:
        head.net.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise LoadError(str(exc)) from exc
    return ClassifierModel(backbone, head, meta["threshold"], meta.get("num_frames"),
                           TrainingHistory.from_dict(meta.get("history")))


def with_threshold(model: ClassifierModel, threshold: float) -> ClassifierModel:
    return replace(model, decision_threshold=threshold)

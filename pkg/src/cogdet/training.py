"""Shared training loop: Adam updates, early stopping, best-weight restore."""

from __future__ import annotations

import copy
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np
import torch

from .errors import TrainingError, ValidationError


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    early_stop_patience: int = 5
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be a positive integer")
        if self.early_stop_patience < 1:
            raise ValidationError("early_stop_patience must be a positive integer")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be a positive integer")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingHistory:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_loss: float | None = None
    stopped_epoch: int | None = None
    early_stopped: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainingHistory | None":
        return None if d is None else cls(**d)


class EarlyStopping:
    """Stop once validation loss has not strictly improved for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = None
        self.bad_epochs = 0

    def step(self, epoch: int, loss: float) -> bool:
        """Record an epoch; return True if it is a new best."""
        if loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = loss, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def simulate_early_stopping(val_losses, patience: int) -> tuple[int, int]:
    """Replay the stopping rule on a loss sequence; returns (stop_epoch, best_epoch), 1-based."""
    stopper = EarlyStopping(patience)
    epoch = 0
    for epoch, loss in enumerate(val_losses, start=1):
        stopper.step(epoch, loss)
        if stopper.should_stop:
            break
    return epoch, stopper.best_epoch


@contextmanager
def seeded(seed: int):
    """Run a block under a fixed torch seed without disturbing the global RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def _snapshot(module: torch.nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def fit(
    module: torch.nn.Module,
    trainable: dict[str, torch.nn.Parameter],
    train_batches: Callable[[int], Iterable],
    batch_loss: Callable,
    evaluate: Callable[[torch.nn.Module], tuple[float, float]],
    cfg: TrainConfig,
    frozen_buffers: Iterable[str] = (),
    track_updates: bool = False,
):
    """Minimise ``batch_loss`` with Adam under early stopping.

    ``batch_loss(module, batch)`` returns ``(loss, n_correct, n)``;
    ``evaluate(module)`` returns ``(val_loss, val_acc)`` in eval mode.
    The module ends holding its best-validation-loss weights. When
    ``track_updates`` is set, the per-step parameter updates are summed and the
    sum matching the restored weights is returned.
    """
    params = [p for p in trainable.values() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    stopper = EarlyStopping(cfg.early_stop_patience)
    history = TrainingHistory()
    frozen_buffers = list(frozen_buffers)
    initial_state = module.state_dict()
    pinned = {k: initial_state[k].detach().clone() for k in frozen_buffers}
    best_state = _snapshot(module)
    updates = {n: torch.zeros_like(p) for n, p in trainable.items()} if track_updates else None
    best_updates = copy.deepcopy(updates)

    for epoch in range(1, cfg.epochs + 1):
        module.train()
        total, correct, count = 0.0, 0, 0
        for batch in train_batches(epoch):
            optimizer.zero_grad(set_to_none=True)
            loss, n_correct, n = batch_loss(module, batch)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}", epoch)
            loss.backward()
            before = {k: p.detach().clone() for k, p in trainable.items()} if track_updates else None
            optimizer.step()
            if track_updates:
                with torch.no_grad():
                    for k, p in trainable.items():
                        updates[k] += p - before[k]
            total += float(loss.detach()) * n
            correct += n_correct
            count += n
        if pinned:
            module.load_state_dict({**module.state_dict(), **pinned})
        module.eval()
        with torch.no_grad():
            val_loss, val_acc = evaluate(module)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}", epoch)
        history.epochs.append({
            "epoch": epoch,
            "train_loss": total / max(count, 1),
            "train_acc": correct / max(count, 1),
            "val_loss": float(val_loss),
            "val_acc": float(val_acc),
        })
        if stopper.step(epoch, val_loss):
            best_state = _snapshot(module)
            if track_updates:
                best_updates = {k: v.clone() for k, v in updates.items()}
        history.stopped_epoch = epoch
        if stopper.should_stop:
            history.early_stopped = True
            break

    module.load_state_dict(best_state)
    module.eval()
    history.best_epoch = stopper.best_epoch
    history.best_val_loss = float(stopper.best)
    return history, best_updates


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_difference_check(module, loss_fn, n_params=20, eps=1e-6, seed=0, names=None):
    """Compare autograd gradients of ``loss_fn(module)`` with central differences.

    The module is evaluated in float64. Returns a list of
    ``(name, flat_index, analytic, numeric, rel_error)`` tuples over
    ``n_params`` randomly chosen scalar parameters.
    """
    module = copy.deepcopy(module).double()
    module.eval()
    named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    if names is not None:
        named = [(n, p) for n, p in named if n in set(names)]
    module.zero_grad()
    loss = loss_fn(module)
    loss.backward()
    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for _, p in named], dtype=float)
    results = []
    for _ in range(n_params):
        k = rng.choice(len(named), p=sizes / sizes.sum())
        name, p = named[k]
        idx = int(rng.integers(p.numel()))
        analytic = float(p.grad.reshape(-1)[idx])
        flat = p.data.reshape(-1)
        orig = float(flat[idx])
        with torch.no_grad():
            flat[idx] = orig + eps
            plus = float(loss_fn(module))
            flat[idx] = orig - eps
            minus = float(loss_fn(module))
            flat[idx] = orig
        numeric = (plus - minus) / (2 * eps)
        results.append((name, idx, analytic, numeric, relative_error(analytic, numeric)))
    return results

"""Training loop: step LR schedule, Nesterov SGD, slice sampling, augmentation.

Nesterov recurrence used throughout (velocity ``v``, momentum ``mu``)::

    v'  = mu * v - lr * g
    p'  = p + mu * v' - lr * g

which is the look-ahead form of Nesterov momentum written in terms of the
gradient at the current parameters.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .models import SegmentationModel, as_batch, segmentation_loss
from .volume import Slice2D, random_crop

__all__ = [
    "TrainConfig",
    "EpochRecord",
    "TrainHistory",
    "TrainingDivergence",
    "PROFILES",
    "profile_config",
    "lr_schedule",
    "nesterov_sgd_step",
    "dihedral",
    "augment",
    "sample_training_batch",
    "train",
]

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    """Raised when a loss or gradient becomes non-finite."""

    def __init__(self, message: str, state: dict | None = None):
        super().__init__(message)
        self.state = state or {}


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "source"
    epochs: int = 100
    iterations_per_epoch: int = 100
    batch_size: int = 32
    lr_initial: float = 1e-2
    lr_reduced: float = 1e-3
    lr_drop_epoch: int = 80
    momentum: float = 0.9
    crop_size: tuple[int, int] = (256, 256)
    augment: bool = False
    seed: int = 0
    loss: str = "bce"

    def __post_init__(self):
        if self.phase not in ("source", "finetune"):
            raise ValueError(f"phase must be 'source' or 'finetune', got {self.phase!r}")
        if self.epochs <= 0 or self.iterations_per_epoch <= 0 or self.batch_size <= 0:
            raise ValueError("epochs, iterations_per_epoch and batch_size must be > 0")
        if not 0 <= self.lr_drop_epoch <= self.epochs:
            raise ValueError(f"lr_drop_epoch must lie in [0, {self.epochs}], got {self.lr_drop_epoch}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.lr_initial <= 0 or self.lr_reduced <= 0:
            raise ValueError("learning rates must be > 0")
        object.__setattr__(self, "crop_size", tuple(int(c) for c in self.crop_size))
        if len(self.crop_size) != 2 or min(self.crop_size) < 1:
            raise ValueError(f"crop_size must be two positive ints, got {self.crop_size}")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["crop_size"] = list(self.crop_size)
        return doc


# Named configuration profiles. "paper" carries the full-scale schedules;
# "desk" keeps their shape (drop at 80% of source / 75% of fine-tuning
# epochs) at a scale that runs on a CPU in minutes.
PROFILES: dict[str, dict[str, TrainConfig]] = {
    "paper": {
        "source": TrainConfig(
            phase="source", epochs=100, iterations_per_epoch=100, batch_size=32,
            lr_initial=1e-2, lr_reduced=1e-3, lr_drop_epoch=80, crop_size=(256, 256),
        ),
        "finetune": TrainConfig(
            phase="finetune", epochs=20, iterations_per_epoch=100, batch_size=32,
            lr_initial=1e-3, lr_reduced=1e-4, lr_drop_epoch=15, crop_size=(256, 256),
        ),
    },
    "desk": {
        "source": TrainConfig(
            phase="source", epochs=20, iterations_per_epoch=15, batch_size=8,
            lr_initial=1e-2, lr_reduced=1e-3, lr_drop_epoch=16, crop_size=(48, 48),
        ),
        "finetune": TrainConfig(
            phase="finetune", epochs=8, iterations_per_epoch=4, batch_size=8,
            lr_initial=1e-2, lr_reduced=1e-3, lr_drop_epoch=6, crop_size=(48, 48),
        ),
    },
}


def profile_config(profile: str, phase: str, **overrides) -> TrainConfig:
    try:
        base = PROFILES[profile][phase]
    except KeyError:
        raise ValueError(f"unknown profile/phase {profile!r}/{phase!r}; profiles: {sorted(PROFILES)}") from None
    return replace(base, **overrides) if overrides else base


def lr_schedule(config: TrainConfig, epoch: int) -> float:
    """Step schedule: ``lr_initial`` before ``lr_drop_epoch``, ``lr_reduced`` from it on."""
    if not 0 <= epoch < config.epochs:
        raise IndexError(f"epoch {epoch} out of range [0, {config.epochs})")
    return config.lr_initial if epoch < config.lr_drop_epoch else config.lr_reduced


def nesterov_sgd_step(params, grads, velocity, lr: float, momentum: float):
    """One Nesterov momentum update, returning new ``(params, velocity)``.

    Works on scalars, numpy arrays or tensors, or equal-length sequences of
    them. Inputs are not modified.
    """
    if isinstance(params, (list, tuple)):
        if not len(params) == len(grads) == len(velocity):
            raise ValueError("params, grads and velocity must have the same length")
        pairs = [nesterov_sgd_step(p, g, v, lr, momentum) for p, g, v in zip(params, grads, velocity)]
        return [p for p, _ in pairs], [v for _, v in pairs]
    if np.shape(params) != np.shape(grads) or np.shape(params) != np.shape(velocity):
        raise ValueError(f"shape mismatch: {np.shape(params)}, {np.shape(grads)}, {np.shape(velocity)}")
    finite = torch.isfinite(grads).all() if isinstance(grads, torch.Tensor) else np.isfinite(grads).all()
    if not finite:
        raise TrainingDivergence("non-finite gradient")
    v_new = momentum * velocity - lr * grads
    p_new = params + momentum * v_new - lr * grads
    return p_new, v_new


def _nesterov_inplace(params: list[torch.Tensor], velocity: list[torch.Tensor], lr: float, momentum: float):
    with torch.no_grad():
        for p, v in zip(params, velocity):
            g = p.grad
            if not torch.isfinite(g).all():
                raise TrainingDivergence("non-finite gradient")
            v.mul_(momentum).sub_(g, alpha=lr)
            p.add_(v, alpha=momentum).sub_(g, alpha=lr)


def dihedral(arr: np.ndarray, element: int) -> np.ndarray:
    """Apply dihedral-group element ``element`` in [0, 8) to a 2D array.

    Elements 0-3 rotate by ``90 * element`` degrees; 4-7 flip horizontally
    and then rotate by ``90 * (element - 4)`` degrees.
    """
    if not 0 <= element < 8:
        raise ValueError(f"dihedral element must lie in [0, 8), got {element}")
    if element >= 4:
        arr = arr[:, ::-1]
    return np.ascontiguousarray(np.rot90(arr, element % 4))


def augment(s: Slice2D, rng: np.random.Generator, element: int | None = None) -> Slice2D:
    """Apply a uniformly drawn rotation/flip to the slice and its label."""
    if element is None:
        element = int(rng.integers(0, 8))
    if element % 2 and s.data.shape[0] != s.data.shape[1]:
        raise ValueError("90-degree rotations need a square slice")
    return Slice2D(
        dihedral(s.data, element),
        pixel_spacing=s.pixel_spacing if element % 2 == 0 else s.pixel_spacing[::-1],
        source_index=s.source_index,
        label=None if s.label is None else dihedral(s.label, element),
    )


def sample_training_batch(pool, config: TrainConfig, rng: np.random.Generator):
    """Draw ``batch_size`` slices with replacement, crop (and augment) them.

    Returns ``(images, labels)`` as float32 arrays of shape (N, H, W).
    """
    if len(pool) == 0:
        raise ValueError("cannot sample a batch from an empty slice pool")
    picks = rng.integers(0, len(pool), size=config.batch_size)
    images, labels = [], []
    for i in picks:
        s = random_crop(pool[int(i)], config.crop_size, rng)
        if config.augment:
            s = augment(s, rng)
        images.append(s.data)
        labels.append(s.label if s.label is not None else np.zeros_like(s.data))
    return np.stack(images).astype(np.float32), np.stack(labels).astype(np.float32)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    mean_loss: float
    seconds: float = field(default=0.0, compare=False)


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "lr", "mean_loss"])
            for rec in self.epochs:
                writer.writerow([rec.epoch, repr(rec.lr), repr(rec.mean_loss)])
        return path


def _set_norm_modes(model: nn.Module) -> None:
    # A batch norm keeps updating running statistics only while its affine
    # parameters are trainable.
    model.train()
    for module in model.modules():
        if isinstance(module, nn.modules.batchnorm._BatchNorm):
            if not any(p.requires_grad for p in module.parameters(recurse=False)):
                module.eval()


def train(model: SegmentationModel, pool, config: TrainConfig) -> tuple[SegmentationModel, TrainHistory]:
    """Optimize the trainable parameters of ``model`` on ``pool``.

    Only parameters with ``requires_grad`` are updated; everything else,
    including running statistics of fully frozen batch norms, is left
    bit-identical. The model is modified in place and also returned.
    """
    if len(pool) == 0:
        raise ValueError("training pool has no annotated slices")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7A11]))
    history = TrainHistory()
    trainable = [p for p in model.parameters() if p.requires_grad]
    velocity = [torch.zeros_like(p) for p in trainable]
    dtype = next(model.parameters()).dtype

    for epoch in range(config.epochs):
        lr = lr_schedule(config, epoch)
        started = time.perf_counter()
        losses = []
        for it in range(config.iterations_per_epoch):
            images, labels = sample_training_batch(pool, config, rng)
            _set_norm_modes(model)
            with torch.set_grad_enabled(bool(trainable)):
                logits = model(as_batch(images, dtype))
                loss = segmentation_loss(logits, as_batch(labels, dtype), config.loss)
            value = float(loss.detach())
            if not np.isfinite(value):
                raise TrainingDivergence(
                    f"non-finite loss at epoch {epoch}, iteration {it}",
                    {"epoch": epoch, "iteration": it, "lr": lr, "loss": value},
                )
            losses.append(value)
            if not trainable:
                continue
            for p in trainable:
                p.grad = None
            loss.backward()
            try:
                _nesterov_inplace(trainable, velocity, lr, config.momentum)
            except TrainingDivergence as exc:
                exc.state.update(epoch=epoch, iteration=it, lr=lr)
                raise
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        history.epochs.append(EpochRecord(epoch, lr, mean_loss, time.perf_counter() - started))
        log.debug("epoch %d lr %g loss %.5f", epoch, lr, mean_loss)

    model.eval()
    return model, history

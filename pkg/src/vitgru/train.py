"""Loss, optimizer, schedule, and the training loop.

One optimizer step per batch; the learning rate follows a half-cosine from
lr0 down to lr_min across epochs. Frozen tensors never enter the optimizer,
so they stay bit-identical across any run. Everything is deterministic given
the seed: shuffling and augmentation draw from named substreams.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import assign_tensors, load_archive, save_archive
from .data import AugmentConfig, ImageSample, augment_batch
from .errors import ConfigError, DataError, LoadError, NumericError, StateError
from .metrics import topk_hit
from .model import Model
from .rng import substream
from .tensor import Tape, Tensor


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 200
    lr0: float = 1e-3
    lr_min: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_path: str | None = None
    weight_decay: float = 0.0
    grad_clip: float = 0.0          # 0 disables
    early_stop_patience: int = 0    # 0 disables
    oversample_minority: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr_min > self.lr0:
            raise ConfigError(f"lr_min ({self.lr_min}) must not exceed lr0 ({self.lr0})")


def cross_entropy(tape: Tape, logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits).

    Stable via log-sum-exp; always >= 0 and differentiable through the tape.
    """
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        from .errors import ShapeError

        raise ShapeError(f"cross_entropy expects [B x C] logits with B labels, got {logits.shape} and {labels.shape}")
    num_classes = logits.shape[1]
    for i, label in enumerate(labels):
        if not 0 <= label < num_classes:
            raise DataError(f"label {label} out of range [0, {num_classes}) at row {i}")
    picked = tape.gather_rows(tape.log_softmax_lastdim(logits), labels.astype(np.int64))
    return tape.scale(tape.sum_all(picked), -1.0 / labels.shape[0])


def cosine_lr(t: int, config: TrainConfig) -> float:
    """Half-cosine decay over epochs: lr0 at t=0 down to lr_min at t=epochs.

    Indices past the end clamp to lr_min.
    """
    if t < 0:
        raise ConfigError(f"schedule index must be >= 0, got {t}")
    total = config.epochs
    if t >= total:
        return config.lr_min
    return config.lr_min + (config.lr0 - config.lr_min) * 0.5 * (1.0 + math.cos(math.pi * t / total))


class Adam:
    """Bias-corrected Adam over the trainable tensors only."""

    def __init__(self, named_params: dict[str, Tensor], config: TrainConfig):
        self.params = {n: t for n, t in named_params.items() if t.requires_grad}
        self.beta1 = config.adam_beta1
        self.beta2 = config.adam_beta2
        self.eps = config.adam_eps
        self.weight_decay = config.weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(t.data) for n, t in self.params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in self.params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                raise StateError(f"missing gradient for trainable parameter {name}")
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(optimizer: Adam, lr: float) -> None:
    """One optimizer update; frozen parameters are untouched by construction."""
    optimizer.step(lr)


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        factor = max_norm / norm
        for t in params.values():
            if t.grad is not None:
                t.grad *= factor
    return norm


# ---------------------------------------------------------------------- #
# checkpointing

def checkpoint_save(model: Model, optimizer: Adam | None, path, epoch: int = -1,
                    best_test_top1: float = -1.0) -> None:
    """Write parameters plus optimizer moments; a round trip is bit-exact."""
    tensors = {name: t.data for name, t in model.named_parameters().items()}
    meta = {
        "config_hash": model.config_hash(),
        "epoch": epoch,
        "best_test_top1": best_test_top1,
        "adam_step": optimizer.t if optimizer else 0,
    }
    if optimizer:
        for name in optimizer.params:
            tensors[f"optim.m.{name}"] = optimizer.m[name]
            tensors[f"optim.v.{name}"] = optimizer.v[name]
    save_archive(path, tensors, meta)


def checkpoint_load(path, model: Model, optimizer: Adam | None = None) -> dict:
    """Restore parameters (and moments, if an optimizer is given); returns metadata."""
    tensors, meta = load_archive(path)
    if meta.get("config_hash") != model.config_hash():
        raise LoadError(
            f"checkpoint {path} was written for config hash {meta.get('config_hash')}, "
            f"model has {model.config_hash()}"
        )
    params = {name: arr for name, arr in tensors.items() if not name.startswith("optim.")}
    assign_tensors(params, model.named_parameters(), context=str(path))
    if optimizer is not None:
        for name in optimizer.params:
            for kind, store in (("m", optimizer.m), ("v", optimizer.v)):
                key = f"optim.{kind}.{name}"
                if key not in tensors:
                    raise LoadError(f"checkpoint {path} is missing optimizer moment {key}")
                if tensors[key].shape != store[name].shape:
                    raise LoadError(f"optimizer moment {key} has shape {tensors[key].shape}, "
                                    f"expected {store[name].shape}")
                store[name] = tensors[key].copy()
        optimizer.t = int(meta.get("adam_step", 0))
    return meta


# ---------------------------------------------------------------------- #
# the loop

def _epoch_order(labels: np.ndarray, epoch: int, seed: int, oversample: bool) -> np.ndarray:
    rng = substream(seed, "shuffle", epoch)
    indices = np.arange(labels.shape[0])
    if oversample:
        # replicate minority-class records so each class appears as often as the largest
        counts = np.bincount(labels)
        target = counts.max()
        extra = []
        for cls, count in enumerate(counts):
            if 0 < count < target:
                pool = indices[labels == cls]
                extra.append(rng.choice(pool, size=target - count, replace=True))
        if extra:
            indices = np.concatenate([indices] + extra)
    rng.shuffle(indices)
    return indices


def _eval_split(model: Model, samples: list[ImageSample]) -> tuple[float, float]:
    hits1 = hits2 = 0
    k2 = min(2, model.config.head.num_classes)
    for s in samples:
        logits = model.forward(Tape(record=False), s.pixels).data
        hits1 += topk_hit(logits, s.label, 1)
        hits2 += topk_hit(logits, s.label, k2)
    n = max(len(samples), 1)
    return hits1 / n, hits2 / n


def train(
    model: Model,
    train_samples: list[ImageSample],
    test_samples: list[ImageSample],
    config: TrainConfig,
    augment: AugmentConfig | None = None,
    log_path=None,
    resume_from=None,
) -> list[dict]:
    """Run the full loop; returns one record per epoch.

    Per epoch: seeded shuffle, batches of batch_size, batch-wise augmentation
    of training images, forward, mean cross-entropy, backward, one Adam step
    at the epoch's cosine learning rate. Test accuracy is measured on clean
    images; the checkpoint with the best test top-1 is kept.
    """
    if not train_samples:
        raise DataError("training split is empty")
    optimizer = Adam(model.named_parameters(), config)
    start_epoch = 0
    best = -1.0
    if resume_from is not None:
        meta = checkpoint_load(resume_from, model, optimizer)
        start_epoch = int(meta.get("epoch", -1)) + 1
        best = float(meta.get("best_test_top1", -1.0))

    labels = np.array([s.label for s in train_samples])
    log: list[dict] = []
    log_file = open(log_path, "a") if log_path else None
    stale = 0
    try:
        for epoch in range(start_epoch, config.epochs):
            t0 = time.perf_counter()
            lr = cosine_lr(epoch, config)
            order = _epoch_order(labels, epoch, config.seed, config.oversample_minority)
            aug_rng = substream(config.seed, "augment", epoch)
            loss_sum = 0.0
            seen = 0
            hits = 0
            for b0 in range(0, order.shape[0], config.batch_size):
                batch_idx = order[b0 : b0 + config.batch_size]
                batch = [train_samples[i] for i in batch_idx]
                if augment is not None:
                    batch = augment_batch(batch, augment, aug_rng)
                batch_labels = np.array([s.label for s in batch])
                tape = Tape()
                rows = [
                    tape.reshape(model.forward(tape, s.pixels), (1, model.config.head.num_classes))
                    for s in batch
                ]
                logits = rows[0] if len(rows) == 1 else tape.stack_rows(rows)
                loss = cross_entropy(tape, logits, batch_labels)
                loss_value = float(loss.data)
                if not math.isfinite(loss_value):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch}, batch starting at index {b0} "
                        f"(samples {[s.path or str(i) for i, s in zip(batch_idx, batch)]})"
                    )
                optimizer.zero_grad()
                tape.backward(loss)
                if config.grad_clip > 0:
                    clip_gradients(optimizer.params, config.grad_clip)
                optimizer.step(lr)
                loss_sum += loss_value * len(batch)
                seen += len(batch)
                preds = logits.data.argmax(axis=1)
                hits += int((preds == batch_labels).sum())
            test_top1, test_top2 = _eval_split(model, test_samples) if test_samples else (0.0, 0.0)
            record = {
                "epoch": epoch,
                "lr": lr,
                "train_loss": loss_sum / seen,
                "train_top1": hits / seen,
                "test_top1": test_top1,
                "test_top2": test_top2,
                "wall_ms": (time.perf_counter() - t0) * 1e3,
            }
            log.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            if test_top1 > best:
                best = test_top1
                stale = 0
                if config.checkpoint_path:
                    checkpoint_save(model, optimizer, config.checkpoint_path, epoch, best)
            else:
                stale += 1
                if config.early_stop_patience and stale >= config.early_stop_patience:
                    break
    finally:
        if log_file:
            log_file.close()
    return log

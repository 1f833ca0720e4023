"""Teacher-forced minibatch training with Adam, clipping and model selection."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .captioner import CaptionerParams, ModelConfig, batch_loss, pad_targets
from .synthdata import DatasetRecord
from .tensor import NonFiniteError, RngStream, backward, no_grad

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    learning_rate: float = 3e-4
    keep_rate: float = 0.8
    augment_sigma: float = 0.02
    grad_clip_norm: float = 5.0
    seed: int = 0
    early_stop_patience: int = 10
    # stop as soon as the selection loss drops below this (None: never)
    target_loss: float | None = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.early_stop_patience < 1:
            raise ValueError("epochs, batch_size and early_stop_patience must be positive")
        if self.learning_rate < 0 or self.augment_sigma < 0 or self.grad_clip_norm <= 0:
            raise ValueError("learning_rate and augment_sigma must be >= 0, grad_clip_norm > 0")
        if not 0.0 < self.keep_rate <= 1.0:
            raise ValueError("keep_rate must lie in (0, 1]")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0

    def to_csv(self, path: str | Path) -> None:
        """Deterministic columns only; wall time lives in ``seconds`` on each entry."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "train_loss", "val_loss"])
            for e in self.epochs:
                writer.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss)])

    @property
    def seconds(self) -> float:
        return sum(e.seconds for e in self.epochs)


class Adam:
    def __init__(self, arrays: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.t = 0

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, value in arrays.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            value -= update.astype(value.dtype, copy=False)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns (grads, pre-clip norm)."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm > max_norm:
        factor = max_norm / norm
        grads = {k: g * g.dtype.type(factor) for k, g in grads.items()}
    return grads, norm


def stack_features(records: Sequence[DatasetRecord]) -> np.ndarray:
    return np.stack([r.features for r in records])


def mean_loss(params: CaptionerParams, features: np.ndarray, targets: Sequence[Sequence[int]],
              batch_size: int = 64) -> float:
    """Mean per-sentence length-normalised loss with dropout off."""
    if len(targets) == 0:
        return float("nan")
    total = 0.0
    p = params.constants()
    with no_grad():
        for start in range(0, len(targets), batch_size):
            chunk = targets[start:start + batch_size]
            loss = batch_loss(features[start:start + batch_size], pad_targets(chunk), p, params.config)
            total += loss.item() * len(chunk)
    return total / len(targets)


def train(train_records: Sequence[DatasetRecord], val_records: Sequence[DatasetRecord],
          cfg: TrainConfig, model_config: ModelConfig | None = None,
          on_epoch: Callable[[EpochStats], None] | None = None,
          init: CaptionerParams | None = None) -> tuple[CaptionerParams, TrainHistory]:
    """Train a captioner; returns the parameters of the best validation epoch.

    With an empty validation split, selection and early stopping use the
    dropout-free loss on the training split instead.
    """
    if not train_records:
        raise TrainingError("training split is empty")
    dtype = np.dtype(cfg.dtype)
    model_config = model_config or ModelConfig()
    params = init.astype(dtype) if init is not None else CaptionerParams.init(model_config, cfg.seed, dtype)
    model_config = params.config

    features = stack_features(train_records).astype(dtype)
    targets = [list(r.tokens) for r in train_records]
    for r in (*train_records, *val_records):
        if max(r.tokens) >= model_config.vocab_size:
            raise TrainingError(f"record {r.id!r} has token ids beyond vocabulary size {model_config.vocab_size}")
    if val_records:
        sel_features = stack_features(val_records).astype(dtype)
        sel_targets = [list(r.tokens) for r in val_records]
    else:
        sel_features, sel_targets = features, targets

    optimizer = Adam(params.arrays, cfg.learning_rate)
    history = TrainHistory()
    best, best_loss, stale = params.copy(), math.inf, 0
    n = len(train_records)
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        order = RngStream(cfg.seed, "shuffle", epoch).permutation(n)
        running = 0.0
        for batch_no, start in enumerate(range(0, n, cfg.batch_size)):
            idx = np.sort(order[start:start + cfg.batch_size])
            rng = RngStream(cfg.seed, "batch", epoch, batch_no)
            a = features[idx]
            if cfg.augment_sigma > 0:
                a = a + rng.child("augment").normal(a.shape, cfg.augment_sigma).astype(dtype)
            try:
                tensors = params.tensors()
                loss = batch_loss(a, pad_targets([targets[i] for i in idx]), tensors, model_config,
                                  rng.child("dropout"), True, cfg.keep_rate)
                grads = backward(loss, tensors.values())
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {batch_no}: {exc}") from exc
            grads, _ = clip_gradients(grads, cfg.grad_clip_norm)
            optimizer.step(params.arrays, grads)
            running += loss.item() * len(idx)

        selection = mean_loss(params, sel_features, sel_targets)
        if not math.isfinite(selection):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        stats = EpochStats(epoch, running / n, selection, time.perf_counter() - started)
        history.epochs.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
        log.info("epoch %d train %.5f val %.5f (%.1fs)", epoch, stats.train_loss, selection, stats.seconds)

        if selection < best_loss:
            best, best_loss, stale = params.copy(), selection, 0
            history.best_epoch = epoch
        else:
            stale += 1
        if stale >= cfg.early_stop_patience:
            break
        if cfg.target_loss is not None and selection < cfg.target_loss:
            break
    return best, history

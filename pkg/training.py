"""Cross-entropy loss, heavy-ball SGD and the mini-batch training loop."""

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from errors import ArgumentError, NumericError, ShapeError, TrainingDiverged
from metrics import predict_dataset
from tensor_core import Tensor, make_rng

logger = logging.getLogger(__name__)

# Floor applied inside the log of the training loss
LOSS_CLIP = 1e-12

CURVE_COLUMNS = ["iteration", "split", "loss", "accuracy", "elapsed_ms"]


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 128
    learning_rate: float = 0.001
    momentum: float = 0.9
    max_iterations: int = 11000
    epochs: Optional[int] = None
    seed: int = 0
    eval_every: int = 100
    class_weighted_loss: bool = False
    log_timing: bool = False
    eval_batch_size: int = 64

    def validate(self) -> "TrainingConfig":
        if self.batch_size < 1:
            raise ArgumentError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate >= 0:
            raise ArgumentError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ArgumentError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs is None and self.max_iterations < 1:
            raise ArgumentError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.epochs is not None and self.epochs < 1:
            raise ArgumentError(f"epochs must be >= 1, got {self.epochs}")
        if self.eval_every < 1 or self.eval_batch_size < 1:
            raise ArgumentError("eval_every and eval_batch_size must be >= 1")
        return self

    def total_iterations(self, n_train: int) -> int:
        """The epoch budget governs when it is set"""
        if self.epochs is not None:
            return self.epochs * math.ceil(n_train / self.batch_size)
        return self.max_iterations


# ==========================
# LOG
# ==========================
@dataclass(frozen=True)
class TrainingRecord:
    iteration: int
    split: str
    loss: float
    accuracy: float
    elapsed_ms: int = 0


@dataclass
class TrainingLog:
    records: List[TrainingRecord] = field(default_factory=list)
    started_at: Optional[datetime] = None
    _last_iteration: Dict[str, int] = field(default_factory=dict, repr=False, compare=False)

    def add(self, record: TrainingRecord):
        last = self._last_iteration.get(record.split)
        if last is not None and record.iteration <= last:
            raise ArgumentError(f"{record.split} iteration {record.iteration} does not follow {last}")
        self._last_iteration[record.split] = record.iteration
        self.records.append(record)

    def split_records(self, split: str) -> List[TrainingRecord]:
        return [r for r in self.records if r.split == split]

    def best_validation(self) -> Optional[TrainingRecord]:
        records = self.split_records("validation")
        return min(records, key=lambda r: (r.loss, r.iteration)) if records else None


def write_curves_csv(log: TrainingLog, path):
    frame = pd.DataFrame([asdict(r) for r in log.records], columns=CURVE_COLUMNS)
    frame.to_csv(path, index=False, lineterminator="\n")


def read_curves_csv(path) -> TrainingLog:
    frame = pd.read_csv(path)
    log = TrainingLog()
    for row in frame.itertuples(index=False):
        log.add(TrainingRecord(int(row.iteration), str(row.split), float(row.loss),
                               float(row.accuracy), int(row.elapsed_ms)))
    return log


# ==========================
# LOSS
# ==========================
def _check_labels(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels).reshape(-1)
    if labels.size != n:
        raise ShapeError(f"{labels.size} labels for {n} predictions")
    if not np.all((labels == 0) | (labels == 1)):
        raise ArgumentError("labels must be 0 or 1")
    return labels.astype(np.int64)


def batch_class_weights(labels) -> np.ndarray:
    """Per-sample weights with w(cancer) = f_free / f_cancer inside the batch"""
    labels = np.asarray(labels).reshape(-1)
    n_cancer = int(np.sum(labels == 1))
    n_free = labels.size - n_cancer
    if n_cancer == 0 or n_free == 0:
        return np.ones(labels.size)
    return np.where(labels == 1, n_free / n_cancer, 1.0)


def cross_entropy_loss(probs: Tensor, labels, sample_weights=None) -> Tuple[float, Tensor]:
    """Mean -ln p(true class) and the fused softmax gradient (probs - onehot) / N"""
    if probs.ndim != 2 or probs.shape[1] != 2:
        raise ShapeError(f"probs must be [N,2], got {probs.shape}")
    n = probs.shape[0]
    labels = _check_labels(labels, n)
    weights = np.ones(n) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    rows = np.arange(n)
    true_probs = np.maximum(probs[rows, labels].astype(np.float64), LOSS_CLIP)
    loss = float(np.sum(weights * -np.log(true_probs)) / n)

    d_logits = probs.astype(np.float64)
    d_logits[rows, labels] -= 1.0
    d_logits *= (weights / n)[:, None]
    return loss, d_logits.astype(probs.dtype)


def batch_accuracy(probs: Tensor, labels, threshold: float = 0.5) -> float:
    return float(np.mean((probs[:, 1] >= threshold).astype(np.int64) == np.asarray(labels)))


# ==========================
# OPTIMIZER
# ==========================
def sgd_momentum_step(params: Dict[str, Tensor], velocities: Dict[str, Tensor],
                      grads: Dict[str, Tensor], lr: float, mu: float):
    """Classical momentum, in place: v <- mu v - lr g ; w <- w + v"""
    for name, weight in params.items():
        velocity, grad = velocities[name], grads[name]
        if not weight.shape == velocity.shape == grad.shape:
            raise ShapeError(f"{name}: shapes differ (param {weight.shape}, "
                             f"velocity {velocity.shape}, grad {grad.shape})")
        velocity *= weight.dtype.type(mu)
        velocity -= weight.dtype.type(lr) * grad
        weight += velocity


# ==========================
# TRAINING LOOP
# ==========================
def dataset_loss(net, dataset, batch_size: int = 64) -> Tuple[float, float]:
    """Unweighted mean cross-entropy and accuracy over a whole dataset"""
    probs = predict_dataset(net, dataset.images, batch_size)
    loss, _ = cross_entropy_loss(probs, dataset.labels)
    return loss, batch_accuracy(probs, dataset.labels)


def train(net, train_set, val_set, cfg: TrainingConfig,
          on_record: Optional[Callable[[TrainingRecord], None]] = None):
    """Mini-batch SGD on ``net`` (updated in place).

    Returns (best, log) where ``best`` is a copy of the network at the
    validation pass with the lowest loss. A validation pass runs every
    ``eval_every`` iterations and after the last one.
    """
    cfg.validate()
    if len(train_set) == 0 or len(val_set) == 0:
        raise ArgumentError("training and validation sets must be non-empty")

    rng = make_rng(cfg.seed)
    n = len(train_set)
    total = cfg.total_iterations(n)
    log = TrainingLog(started_at=datetime.now(timezone.utc))
    clock_start = time.perf_counter()

    def elapsed_ms():
        return int((time.perf_counter() - clock_start) * 1000) if cfg.log_timing else 0

    def record(iteration, split, loss, accuracy):
        entry = TrainingRecord(iteration, split, loss, accuracy, elapsed_ms())
        log.add(entry)
        if on_record:
            on_record(entry)

    best = net.copy()
    best_loss = math.inf
    iteration = 0
    logger.info(f"🚀 Training for {total} iterations on {n} samples (batch {cfg.batch_size})")

    while iteration < total:
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            if iteration >= total:
                break
            batch = order[start:start + cfg.batch_size]
            labels = train_set.labels[batch]
            try:
                probs, trace = net.forward(train_set.images[batch])
            except NumericError as e:
                raise TrainingDiverged(f"non-finite activations at iteration {iteration + 1}",
                                       network=best, log=log, iteration=iteration + 1) from e
            weights = batch_class_weights(labels) if cfg.class_weighted_loss else None
            loss, d_logits = cross_entropy_loss(probs, labels, weights)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite training loss at iteration {iteration + 1}",
                                       network=best, log=log, iteration=iteration + 1)
            grads = net.backward(trace, d_logits)
            sgd_momentum_step(net.params, net.velocities, grads, cfg.learning_rate, cfg.momentum)
            net.mark_updated()
            iteration += 1
            record(iteration, "train", loss, batch_accuracy(probs, labels))

            if iteration % cfg.eval_every == 0 or iteration == total:
                try:
                    val_loss, val_accuracy = dataset_loss(net, val_set, cfg.eval_batch_size)
                except NumericError:
                    val_loss, val_accuracy = math.nan, math.nan
                if not math.isfinite(val_loss):
                    raise TrainingDiverged(f"non-finite validation loss at iteration {iteration}",
                                           network=best, log=log, iteration=iteration)
                record(iteration, "validation", val_loss, val_accuracy)
                logger.info(f"iteration {iteration}/{total}: train loss {loss:.4f}, "
                            f"validation loss {val_loss:.4f}, accuracy {val_accuracy:.3f}")
                if val_loss < best_loss:
                    best_loss = val_loss
                    best = net.copy()

    logger.info(f"✅ Training finished; best validation loss {best_loss:.4f}")
    return best, log

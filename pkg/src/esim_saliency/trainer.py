"""Mini-batch Adam training, evaluation and per-epoch reporting."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .esim import EsimParams, loss_and_grads, predict_logits

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    d: int = 50
    r: int = 50
    d_h: Optional[int] = None
    learning_rate: float = 4e-4
    batch_size: int = 32
    epochs: int = 3
    clip_norm: float = 10.0
    seed: int = 0
    eval_interval: int = 1
    dropout: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    stop_at_train_accuracy: Optional[float] = None

    def __post_init__(self):
        if self.d_h is None:
            self.d_h = self.d
        for name in ("d", "r", "d_h", "batch_size", "epochs", "eval_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    eval_accuracy: Optional[float]
    wall_time: float


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    steps: int = 0
    wall_time: float = 0.0

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(e), sort_keys=True) + "\n" for e in self.epochs)


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # [gold, predicted] counts
    predictions: list


class Adam:
    """Adam with bias-corrected moments over a dict of arrays."""

    def __init__(self, params: dict, lr=4e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_by_global_norm(grads: dict, clip_norm: float) -> float:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``clip_norm``."""
    norm = global_norm(grads)
    if norm > clip_norm:
        factor = clip_norm / norm
        for g in grads.values():
            g *= factor
    return norm


def evaluate(params: EsimParams, examples: Sequence) -> EvalResult:
    if not examples:
        raise ValueError("evaluate needs a non-empty data set")
    confusion = np.zeros((3, 3), dtype=np.int64)
    preds = []
    for ex in examples:
        pred = int(np.argmax(predict_logits(params, ex)))
        preds.append(pred)
        if ex.label >= 0:
            confusion[ex.label, pred] += 1
    total = confusion.sum()
    accuracy = float(np.trace(confusion) / total) if total else float("nan")
    return EvalResult(accuracy, confusion, preds)


def train(config: TrainConfig, train_set: Sequence, eval_set: Sequence = (), vocab_size: Optional[int] = None,
          params: Optional[EsimParams] = None,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None):
    """Train ESIM with cross-entropy and Adam; returns ``(params, TrainReport)``.

    The epoch order comes from a generator seeded with ``config.seed``, so
    identical configs give identical runs. Final parameters are rounded to
    the 32-bit grid that checkpoints store.
    """
    if not train_set:
        raise ValueError("train set is empty")
    if params is None:
        if vocab_size is None:
            raise ValueError("vocab_size is required when no initial params are given")
        params = EsimParams.initialize(config.d, config.r, vocab_size, config.d_h, seed=config.seed)
    else:
        params = params.copy()
    rng = np.random.default_rng(config.seed)
    drop_rng = np.random.default_rng(config.seed + 1)
    opt = Adam(params.arrays, config.learning_rate, config.beta1, config.beta2, config.eps)
    report = TrainReport()
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_set))
        total_loss, correct = 0.0, 0
        for b, lo in enumerate(range(0, len(order), config.batch_size)):
            batch = [train_set[k] for k in order[lo:lo + config.batch_size]]
            grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
            batch_loss = 0.0
            for ex in batch:
                loss, pred, _ = loss_and_grads(params, ex, grads, 1.0 / len(batch),
                                               config.dropout, drop_rng)
                batch_loss += loss
                correct += pred == ex.label
            if not math.isfinite(batch_loss):
                raise TrainingDivergedError(f"non-finite loss in epoch {epoch}, batch {b} "
                                            f"(examples {list(order[lo:lo + config.batch_size])})")
            total_loss += batch_loss
            clip_by_global_norm(grads, config.clip_norm)
            opt.step(params.arrays, grads)
            report.steps += 1
        eval_acc = None
        if eval_set and epoch % config.eval_interval == 0:
            eval_acc = evaluate(params, eval_set).accuracy
        record = EpochRecord(epoch, total_loss / len(train_set), correct / len(train_set), eval_acc,
                             time.perf_counter() - start)
        report.epochs.append(record)
        logger.info("epoch %d loss %.4f train acc %.3f eval acc %s", epoch, record.train_loss,
                    record.train_accuracy, eval_acc)
        if on_epoch is not None:
            on_epoch(record)
        if (config.stop_at_train_accuracy is not None
                and evaluate(params.as_float32_grid(), train_set).accuracy >= config.stop_at_train_accuracy):
            break
    report.wall_time = time.perf_counter() - start
    return params.as_float32_grid(), report

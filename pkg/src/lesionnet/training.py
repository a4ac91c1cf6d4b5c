"""Cross-entropy training with momentum SGD, validation tracking and evaluation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import metrics as MT
from . import tensor as T
from .data import AugmentationConfig, Batch, Sample, make_batches
from .errors import ConfigError, DivergenceError, EmptyDatasetError, LabelIndexError, ShapeError
from .model import Model, checkpoint_bytes
from .tensor import Tensor, record

LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "val_precision_weighted", "val_recall_weighted")


def cross_entropy(logits: Tensor, labels, class_weights: Optional[np.ndarray] = None) -> Tensor:
    """Batch mean of ``-w[y] * log softmax(logits)[y]``, via log-sum-exp."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [B, K], got {list(logits.shape)}")
    b, k = logits.shape
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size != b:
        raise ShapeError(f"{y.size} labels for {b} logit rows")
    if np.any((y < 0) | (y >= k)):
        raise LabelIndexError(f"labels must lie in [0, {k})")
    w = np.ones(k) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    rows = np.arange(b)
    wy = w[y]
    loss = float(np.sum(wy * (lse - z[rows, y])) / b)

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, y] -= 1.0
        return (g[0] * p * (wy / b)[:, None],)

    return record("cross_entropy", np.array([loss]), (logits,), bw)


def inverse_frequency_weights(labels, num_classes: int) -> np.ndarray:
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes).astype(np.float64)
    present = counts > 0
    w = np.zeros(num_classes)
    w[present] = counts.sum() / (present.sum() * counts[present])
    return w


def sgd_step(params: dict, grads: dict, state: dict, lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> dict:
    """``v <- momentum * v + grad + weight_decay * p``; ``p <- p - lr * v``.

    ``params`` maps names to tensors (updated in place); ``state`` holds the
    velocities and is returned.
    """
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient {list(g.shape)} vs parameter {list(p.shape)}")
        v = state.get(name)
        v = g + weight_decay * p.data if v is None else momentum * v + g + weight_decay * p.data
        state[name] = v
        p.data = p.data - lr * v
    return state


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    checkpoint_path: Optional[str] = None
    class_weighting: str = "inverse-frequency"
    augment: Optional[AugmentationConfig] = None

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be at least 1")
        if self.class_weighting not in ("none", "inverse-frequency"):
            raise ConfigError(f"unknown class weighting {self.class_weighting!r}")
        if self.augment is not None:
            self.augment.validate()
        return self


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_precision_weighted: float
    val_recall_weighted: float
    train_accuracy: float = float("nan")


@dataclass
class TrainResult:
    log: list = field(default_factory=list)
    best_epoch: int = 0
    best_loss: float = math.inf
    best_checkpoint: Optional[bytes] = None

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for e in self.log:
            w.writerow([e.epoch, *(repr(float(getattr(e, c))) for c in LOG_COLUMNS[1:])])
        return buf.getvalue()


def predict_batches(model: Model, batches: Sequence[Batch]):
    """Softmax probabilities and labels gathered over batches (inference mode)."""
    if not batches:
        raise EmptyDatasetError("no batches to evaluate")
    probs, labels, logits = [], [], []
    for b in batches:
        z = model.forward(b.images).data
        logits.append(z)
        probs.append(T.softmax_array(z, 1))
        labels.append(b.labels)
    return np.concatenate(probs), np.concatenate(labels), np.concatenate(logits)


def _mean_ce(logits: np.ndarray, labels: np.ndarray) -> float:
    with T.no_grad():
        return cross_entropy(Tensor(logits), labels).item()


def fit(
    model: Model,
    train: Sequence[Sample],
    val: Sequence[Sample],
    config: TrainConfig,
    on_epoch: Optional[Callable[[EpochLog], bool]] = None,
) -> TrainResult:
    """Train in place; the checkpoint with the lowest validation loss is retained.

    Without validation samples the training loss drives selection.
    ``on_epoch`` sees each log entry and may return True to stop.
    """
    config.validate()
    if not train:
        raise EmptyDatasetError("training set is empty")
    k = model.config.num_classes
    weights = None
    if config.class_weighting == "inverse-frequency":
        weights = inverse_frequency_weights([s.label for s in train], k)
    params = model.params
    velocity: dict = {}
    result = TrainResult()
    n = len(train)
    eval_train = make_batches(train, config.batch_size)
    eval_val = make_batches(val, config.batch_size) if val else None

    for epoch in range(1, config.epochs + 1):
        total = 0.0
        for batch in make_batches(train, config.batch_size, config.seed, config.augment, epoch):
            model.zero_grad()
            loss = cross_entropy(model.forward(batch.images, training=True), batch.labels, weights)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"loss became {value} in epoch {epoch}")
            T.backward(loss)
            sgd_step(params, {name: t.grad for name, t in params.items()}, velocity,
                     config.learning_rate, config.momentum, config.weight_decay)
            total += value * len(batch.labels)
        train_loss = total / n

        tp, tl, _ = predict_batches(model, eval_train)
        acc = float(np.mean(tp.argmax(axis=1) == tl))
        if eval_val is not None:
            vp, vl, vz = predict_batches(model, eval_val)
            val_loss = _mean_ce(vz, vl)
            names = list(range(k))
            cm = MT.confusion_matrix(list(vl), list(vp.argmax(axis=1)), names)
            rep, _ = MT.build_report(cm)
            vprec, vrec = rep.weighted.precision, rep.weighted.recall
        else:
            val_loss, vprec, vrec = float("nan"), float("nan"), float("nan")
        entry = EpochLog(epoch, train_loss, val_loss, vprec, vrec, acc)
        result.log.append(entry)

        criterion = val_loss if eval_val is not None else train_loss
        if criterion < result.best_loss:
            result.best_loss = criterion
            result.best_epoch = epoch
            result.best_checkpoint = checkpoint_bytes(
                model, {"epoch": epoch, "seed": config.seed, "loss": criterion}
            )
            if config.checkpoint_path:
                with open(config.checkpoint_path, "wb") as fh:
                    fh.write(result.best_checkpoint)
        if on_epoch is not None and on_epoch(entry):
            break
    return result


@dataclass
class Evaluation:
    report: MT.MetricsReport
    confusion: MT.ConfusionMatrix
    curves: dict
    probabilities: np.ndarray
    labels: list


def evaluate(model: Model, batches: Sequence[Batch], classes: Sequence[str], map3: bool = False) -> Evaluation:
    """Confusion matrix, per-class report and PR curves over ``batches``.

    With ``map3`` labels and argmax predictions are folded into the
    three-group taxonomy and group scores are summed class probabilities.
    """
    classes = tuple(classes)
    probs, labels, _ = predict_batches(model, batches)
    true = [classes[i] for i in labels]
    pred = [classes[i] for i in probs.argmax(axis=1)]
    if map3:
        groups = [MT.map_to_3class(c) for c in classes]
        scores = np.stack([probs[:, [g == G for g in groups]].sum(axis=1) for G in MT.CLASSES_3], axis=1)
        true = [MT.map_to_3class(c) for c in true]
        pred = [MT.map_to_3class(c) for c in pred]
        names = MT.CLASSES_3
    else:
        scores, names = probs, classes
    cm = MT.confusion_matrix(true, pred, names)
    report, curves = MT.build_report(cm, scores, true)
    return Evaluation(report, cm, curves, scores, true)

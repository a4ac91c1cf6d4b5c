"""Confusion matrices, per-class precision/recall, PR curves, AP and reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import DegenerateError, SizeError, TaxonomyError, UndefinedRecallError

CLASSES_7 = (
    "actinic-keratosis",
    "basal-cell-carcinoma",
    "benign-keratosis",
    "dermatofibroma",
    "melanoma",
    "nevus",
    "vascular-lesion",
)
CLASSES_3 = ("melanoma", "non-melanoma-cancer", "benign")

_GROUP = {
    "melanoma": "melanoma",
    "actinic-keratosis": "non-melanoma-cancer",
    "basal-cell-carcinoma": "non-melanoma-cancer",
    "benign-keratosis": "benign",
    "dermatofibroma": "benign",
    "nevus": "benign",
    "vascular-lesion": "benign",
}


def map_to_3class(label: str) -> str:
    try:
        return _GROUP[label]
    except KeyError:
        raise TaxonomyError(f"unknown lesion label {label!r}") from None


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [true, predicted]
    classes: tuple

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def index(self, c) -> int:
        if isinstance(c, (int, np.integer)):
            if not 0 <= c < len(self.classes):
                raise IndexError(f"class index {c} out of range")
            return int(c)
        return self.classes.index(c)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred", *self.classes])
        for name, row in zip(self.classes, self.counts):
            w.writerow([name, *(int(v) for v in row)])
        return buf.getvalue()


def confusion_matrix(true_labels: Sequence, predicted_labels: Sequence, classes: Sequence) -> ConfusionMatrix:
    classes = tuple(classes)
    if len(true_labels) != len(predicted_labels):
        raise SizeError(f"{len(true_labels)} true labels vs {len(predicted_labels)} predictions")
    pos = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(true_labels, predicted_labels):
        if t not in pos or p not in pos:
            raise TaxonomyError(f"label outside class list: {t!r} / {p!r}")
        counts[pos[t], pos[p]] += 1
    return ConfusionMatrix(counts, classes)


class PrecisionRecall(NamedTuple):
    precision: float
    recall: float
    degenerate: bool


def precision_recall(cm: ConfusionMatrix, c) -> PrecisionRecall:
    """TP/(TP+FP) and TP/(TP+FN); an empty denominator yields 0 and sets ``degenerate``."""
    i = cm.index(c)
    tp = int(cm.counts[i, i])
    fp = int(cm.counts[:, i].sum()) - tp
    fn = int(cm.counts[i, :].sum()) - tp
    degenerate = (tp + fp == 0) or (tp + fn == 0)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return PrecisionRecall(p, r, degenerate)


@dataclass
class PRCurve:
    thresholds: np.ndarray  # descending distinct scores
    recall: np.ndarray
    precision: np.ndarray
    class_name: Optional[str] = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "recall", "precision"])
        for t, r, p in zip(self.thresholds, self.recall, self.precision):
            w.writerow([repr(float(t)), repr(float(r)), repr(float(p))])
        return buf.getvalue()


def pr_curve(scores: Sequence[float], labels: Sequence, class_name: Optional[str] = None) -> PRCurve:
    """Sweep a threshold down through every distinct score.

    All samples tied at a score enter together, so each distinct score
    contributes exactly one (recall, precision) point.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise SizeError(f"scores {s.shape} and labels {y.shape} must be equal-length vectors")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedRecallError("no positive labels: recall is undefined")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last]
    seen = np.flatnonzero(last) + 1
    return PRCurve(s[last], tp / n_pos, tp / seen, class_name)


def average_precision(curve: PRCurve) -> float:
    """Step sum of precision weighted by the recall gained at each threshold."""
    r = np.asarray(curve.recall, dtype=np.float64)
    p = np.asarray(curve.precision, dtype=np.float64)
    return float(np.sum(np.diff(r, prepend=0.0) * p))


@dataclass
class ClassRow:
    name: str
    support: float
    precision: float
    recall: float
    ap: float


@dataclass
class MetricsReport:
    rows: list
    weighted: ClassRow
    macro: ClassRow
    degenerate: list = field(default_factory=list)

    @property
    def headline(self) -> ClassRow:
        return self.weighted

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "support", "precision", "recall", "ap"])
        for r in [*self.rows, self.weighted, self.macro]:
            w.writerow([r.name, _num(r.support), *(repr(float(v)) for v in (r.precision, r.recall, r.ap))])
        return buf.getvalue()


def _num(v) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def aggregate_report(rows: Sequence[ClassRow]) -> MetricsReport:
    """Support-weighted (headline) and unweighted aggregates of per-class rows."""
    rows = list(rows)
    if not rows:
        raise DegenerateError("report needs at least one class row")
    sup = np.array([r.support for r in rows], dtype=np.float64)
    if np.any(sup < 0):
        raise ValueError("supports must be non-negative")
    total = sup.sum()
    if total == 0:
        raise DegenerateError("all class supports are zero")
    cols = {k: np.array([getattr(r, k) for r in rows], dtype=np.float64) for k in ("precision", "recall", "ap")}
    weighted = ClassRow("weighted", total, *(float(np.dot(sup, cols[k]) / total) for k in cols))
    macro = ClassRow("macro", total, *(float(cols[k].mean()) for k in cols))
    return MetricsReport(rows, weighted, macro)


def build_report(cm: ConfusionMatrix, scores: Optional[np.ndarray] = None, labels=None):
    """Per-class rows from a confusion matrix plus optional score matrix.

    ``scores`` is ``[N, K]`` with column k the score for ``cm.classes[k]``;
    ``labels`` holds the true class of each row.  Returns the report and the
    PR curve of every class that has positives.
    """
    rows, curves, degenerate = [], {}, []
    support = cm.support()
    for k, name in enumerate(cm.classes):
        pr = precision_recall(cm, k)
        ap = 0.0
        if scores is not None and support[k] > 0:
            curve = pr_curve(scores[:, k], [lab == name for lab in labels], name)
            curves[name] = curve
            ap = average_precision(curve)
        if pr.degenerate:
            degenerate.append(name)
        rows.append(ClassRow(name, int(support[k]), pr.precision, pr.recall, ap))
    report = aggregate_report(rows)
    report.degenerate = degenerate
    return report, curves


def write_text(path, text: str):
    Path(path).write_text(text, encoding="utf-8", newline="")


def plot_pr_curve(curve: PRCurve, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4), dpi=100)
    ax.step(np.r_[0.0, curve.recall], np.r_[curve.precision[0], curve.precision], where="post")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(f"PR curve: {curve.class_name}  AP={average_precision(curve):.3f}")
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def plot_confusion(cm: ConfusionMatrix, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    k = len(cm.classes)
    fig, ax = plt.subplots(figsize=(1.2 * k + 2, 1.2 * k + 1), dpi=100)
    ax.imshow(cm.counts, cmap="Blues")
    ax.set_xticks(range(k), cm.classes, rotation=45, ha="right")
    ax.set_yticks(range(k), cm.classes)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(k):
        for j in range(k):
            ax.text(j, i, int(cm.counts[i, j]), ha="center", va="center")
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)

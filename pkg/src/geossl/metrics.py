"""Classification metrics from a confusion matrix, plus one-vs-rest AUC.

Conventions
-----------
* Precision, recall and F1 are computed per class (one-vs-rest) and then
  macro-averaged. ``averaging="micro"`` pools the counts instead.
* A class that is never predicted has precision 0 and still counts toward
  the macro precision.
* A class with no true members has undefined recall; it is left out of the
  macro recall and macro F1. Both cases are listed in the report.
* AUC ties count 1/2 (Mann-Whitney). Classes absent from ``truth`` are
  skipped.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import InvalidArgument, UndefinedMetric

AVERAGINGS = ("macro", "micro")


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, cols: predicted class

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def one_vs_rest(self):
        """Per-class (tp, fp, fn) count vectors."""
        tp = np.diag(self.counts).astype(np.int64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        return tp, fp, fn


def confusion(pred, truth, num_classes: int) -> ConfusionMatrix:
    pred = np.asarray(pred, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if pred.shape != truth.shape:
        raise InvalidArgument(f"length mismatch: {pred.size} predictions vs {truth.size} labels")
    if pred.size == 0:
        raise InvalidArgument("cannot build a confusion matrix from zero samples")
    for name, arr in (("pred", pred), ("truth", truth)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise InvalidArgument(f"{name} label out of range [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (truth, pred), 1)
    return ConfusionMatrix(counts)


def _check(cm: ConfusionMatrix, averaging: str) -> None:
    if cm.total == 0:
        raise UndefinedMetric("confusion matrix is empty")
    if averaging not in AVERAGINGS:
        raise InvalidArgument(f"unknown averaging {averaging!r}")


def per_class_precision(cm: ConfusionMatrix) -> np.ndarray:
    tp, fp, _ = cm.one_vs_rest()
    denom = tp + fp
    return np.divide(tp, denom, out=np.zeros(len(tp)), where=denom > 0)


def per_class_recall(cm: ConfusionMatrix) -> np.ndarray:
    """Recall per class; NaN where the class has no true members."""
    tp, _, fn = cm.one_vs_rest()
    denom = tp + fn
    return np.divide(tp, denom, out=np.full(len(tp), np.nan), where=denom > 0)


def per_class_f1(cm: ConfusionMatrix) -> np.ndarray:
    p = per_class_precision(cm)
    r = per_class_recall(cm)
    s = p + r
    f1 = np.divide(2 * p * r, s, out=np.zeros(len(p)), where=s > 0)
    f1[np.isnan(r)] = np.nan
    return f1


def accuracy(cm: ConfusionMatrix) -> float:
    _check(cm, "macro")
    return float(np.trace(cm.counts) / cm.total)


def precision(cm: ConfusionMatrix, averaging: str = "macro") -> float:
    _check(cm, averaging)
    if averaging == "micro":
        tp, fp, _ = cm.one_vs_rest()
        return float(tp.sum() / (tp.sum() + fp.sum()))
    return float(per_class_precision(cm).mean())


def recall(cm: ConfusionMatrix, averaging: str = "macro") -> float:
    _check(cm, averaging)
    if averaging == "micro":
        tp, _, fn = cm.one_vs_rest()
        return float(tp.sum() / (tp.sum() + fn.sum()))
    return float(np.nanmean(per_class_recall(cm)))


def f1(cm: ConfusionMatrix, averaging: str = "macro") -> float:
    _check(cm, averaging)
    if averaging == "micro":
        p, r = precision(cm, "micro"), recall(cm, "micro")
        return 2 * p * r / (p + r) if p + r > 0 else 0.0
    return float(np.nanmean(per_class_f1(cm)))


def auc_ovr(scores, truth, num_classes: int | None = None) -> float:
    """Macro one-vs-rest ROC-AUC via the rank-sum statistic."""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if scores.ndim != 2 or scores.shape[0] != truth.size:
        raise InvalidArgument("scores must be n x C with one row per label")
    if not np.all(np.isfinite(scores)):
        raise InvalidArgument("scores must be finite")
    C = scores.shape[1] if num_classes is None else num_classes
    if np.unique(truth).size < 2:
        raise UndefinedMetric("AUC needs at least two classes present in truth")
    aucs = []
    for c in range(C):
        pos = truth == c
        n_pos = int(pos.sum())
        n_neg = truth.size - n_pos
        if n_pos == 0 or n_neg == 0:
            continue
        ranks = rankdata(scores[:, c])  # average ranks give ties 1/2
        u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2
        aucs.append(u / (n_pos * n_neg))
    return float(np.mean(aucs))


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float | None
    n_samples: int
    averaging: str = "macro"
    per_class: dict = field(default_factory=dict)
    zero_prediction_classes: list = field(default_factory=list)
    zero_support_classes: list = field(default_factory=list)

    SCALARS = ("accuracy", "precision", "recall", "f1", "auc")

    def scalars(self) -> dict:
        return {k: getattr(self, k) for k in self.SCALARS}

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))


def evaluate(pred, truth, num_classes: int, scores=None, class_names=None) -> MetricsReport:
    cm = confusion(pred, truth, num_classes)
    tp, fp, fn = cm.one_vs_rest()
    p, r, f = per_class_precision(cm), per_class_recall(cm), per_class_f1(cm)
    names = list(class_names) if class_names is not None else [str(c) for c in range(num_classes)]
    per_class = {
        names[c]: {
            "precision": float(p[c]),
            "recall": None if np.isnan(r[c]) else float(r[c]),
            "f1": None if np.isnan(f[c]) else float(f[c]),
            "support": int(tp[c] + fn[c]),
        }
        for c in range(num_classes)
    }
    auc = None
    if scores is not None:
        try:
            auc = auc_ovr(scores, truth, num_classes)
        except UndefinedMetric:
            auc = None
    return MetricsReport(
        accuracy=accuracy(cm),
        precision=precision(cm),
        recall=recall(cm),
        f1=f1(cm),
        auc=auc,
        n_samples=cm.total,
        per_class=per_class,
        zero_prediction_classes=[names[c] for c in range(num_classes) if tp[c] + fp[c] == 0],
        zero_support_classes=[names[c] for c in range(num_classes) if tp[c] + fn[c] == 0],
    )

"""Confusion-matrix metrics, macro averaging, ROC/AUC and TPR at a fixed FPR."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .errors import EmptyMatrix, SingleClass

logger = logging.getLogger(__name__)


class _NotDefined:
    """Marker for a ratio whose denominator is zero.  Serializes as JSON ``null``."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NotDefined"

    def __bool__(self):
        return False

    def __reduce__(self):
        return (_NotDefined, ())


NotDefined = _NotDefined()
Metric = Union[float, _NotDefined]


def _ratio(num: float, den: float) -> Metric:
    return num / den if den else NotDefined


def is_defined(x) -> bool:
    return x is not NotDefined


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, y_true, y_pred, positive: int = 1) -> "ConfusionMatrix":
        t = np.asarray(y_true) == positive
        p = np.asarray(y_pred) == positive
        return cls(int((t & p).sum()), int((~t & p).sum()), int((~t & ~p).sum()),
                   int((t & ~p).sum()))

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def binary_metrics(cm: ConfusionMatrix) -> Dict[str, Metric]:
    """Accuracy, precision, recall, F1 and FPR; zero denominators give ``NotDefined``."""
    if cm.total == 0:
        raise EmptyMatrix("confusion matrix is empty")
    return {
        "accuracy": (cm.tp + cm.tn) / cm.total,
        "precision": _ratio(cm.tp, cm.tp + cm.fp),
        "recall": _ratio(cm.tp, cm.tp + cm.fn),
        # harmonic mean of precision and recall, written without the intermediate ratios
        "f1": _ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn),
        "fpr": _ratio(cm.fp, cm.fp + cm.tn),
    }


def per_class_confusion(y_true, y_pred, n_classes: Optional[int] = None) -> List[ConfusionMatrix]:
    """One-vs-rest confusion matrix for each class id ``0..n_classes-1``."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if n_classes is None:
        n_classes = int(max(y_true.max(initial=-1), y_pred.max(initial=-1))) + 1
    return [ConfusionMatrix.from_predictions(y_true, y_pred, c) for c in range(n_classes)]


def macro_metrics(cms: Sequence[ConfusionMatrix]) -> Dict[str, object]:
    """Unweighted mean of each metric over classes; undefined entries are skipped and counted."""
    per_class = [binary_metrics(cm) for cm in cms]
    out: Dict[str, object] = {}
    skipped: Dict[str, int] = {}
    for name in ("accuracy", "precision", "recall", "f1", "fpr"):
        vals = [m[name] for m in per_class if is_defined(m[name])]
        skipped[name] = len(per_class) - len(vals)
        out[name] = float(np.mean(vals)) if vals else NotDefined
        if skipped[name]:
            logger.warning("macro %s: %d of %d classes not defined, excluded", name,
                           skipped[name], len(per_class))
    out["not_defined"] = skipped
    return out


# -- ROC --------------------------------------------------------------------

@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # score at each operating point (inf for the origin)

    def table(self) -> str:
        lines = ["fpr,tpr"]
        lines.extend(f"{f:.12g},{t:.12g}" for f, t in zip(self.fpr, self.tpr))
        return "\n".join(lines) + "\n"


def roc_curve(scores, labels) -> RocCurve:
    """Sweep thresholds over distinct scores, highest first; ``score >= thr`` is positive."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("ROC needs both positive and negative labels")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each group of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    return RocCurve(fpr, tpr, np.r_[np.inf, s[ends]])


def auc(curve: RocCurve) -> float:
    f, t = curve.fpr, curve.tpr
    return float(np.sum((f[1:] - f[:-1]) * (t[1:] + t[:-1]) / 2.0))


def roc_auc(scores, labels):
    """``(RocCurve, AUC)`` with the trapezoid rule; tied scores form a single step."""
    curve = roc_curve(scores, labels)
    return curve, auc(curve)


def tpr_at_fpr(curve: RocCurve, fpr_target: float) -> float:
    """Largest TPR among operating points with FPR at or below the target (no interpolation)."""
    ok = curve.fpr <= fpr_target + 1e-15
    return float(curve.tpr[ok].max())


def ovr_macro_auc(probs, labels) -> Metric:
    """Mean one-vs-rest AUC over classes present with both outcomes."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    vals = []
    for c in range(probs.shape[1]):
        pos = labels == c
        if pos.any() and (~pos).any():
            vals.append(roc_auc(probs[:, c], pos)[1])
    return float(np.mean(vals)) if vals else NotDefined


def jsonable(obj):
    """Recursively replace ``NotDefined`` with ``None`` and numpy scalars with Python ones."""
    if obj is NotDefined:
        return None
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    return obj

"""
Confusion matrix, threshold-free classification metrics and
one-vs-rest ROC curves.

All macro averages are unweighted means over the six classes.  Ratios
whose denominator is zero are reported as 0 and flagged on the
per-class row.
"""

import json
import logging
import math
from dataclasses import dataclass
from os import PathLike
from pathlib import Path
from typing import Mapping, NamedTuple, Optional

import numpy as np
from scipy.integrate import trapezoid

from .export import fmt, write_csv, write_json
from .labels import CLASS_NAMES, N_CLASSES, ClassLabel, argmax_index
from .predictions import PredictionSet, check_same_ids
from .pydantic_models import MetricsReport, PerClassRow

LOGGER = logging.getLogger("cattle-ensemble")

PUBLISHED_CONFUSION = Path(__file__).parent / "data" / "published_confusion.json"


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts indexed [true class, predicted class]."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.int64)
        if counts.shape != (N_CLASSES, N_CLASSES):
            raise ValueError("confusion matrix must be %dx%d, got %s" % (N_CLASSES, N_CLASSES, counts.shape))
        if np.any(counts < 0):
            raise ValueError("confusion counts must be non-negative")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def supports(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def predicted_counts(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def errors(self) -> int:
        return self.total - int(np.trace(self.counts))


def confusion_from_indices(y_true, y_pred) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError("label and prediction arrays differ in length")
    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return ConfusionMatrix(counts)


def confusion(labels: Mapping[str, ClassLabel], predicted: Mapping[str, ClassLabel]) -> ConfusionMatrix:
    check_same_ids(labels.keys(), predicted.keys(), "prediction")
    if not labels:
        raise ValueError("cannot build a confusion matrix from no samples")
    ids = sorted(labels)
    return confusion_from_indices([int(labels[i]) for i in ids], [int(predicted[i]) for i in ids])


def load_confusion_json(path: PathLike = PUBLISHED_CONFUSION) -> ConfusionMatrix:
    """Read ``{"classes": [...], "counts": [[...], ...]}``."""
    with open(path) as infh:
        data = json.load(infh)
    if not isinstance(data, dict) or "counts" not in data:
        raise ValueError("%s: expected an object with a 'counts' matrix" % path)
    classes = data.get("classes", list(CLASS_NAMES))
    if not isinstance(classes, list) or classes != list(CLASS_NAMES):
        raise ValueError("%s: classes must be listed in canonical order %s" % (path, ", ".join(CLASS_NAMES)))
    try:
        return ConfusionMatrix(data["counts"])
    except (TypeError, ValueError) as err:
        raise ValueError("%s: bad counts matrix: %s" % (path, err)) from None


def _ratio(num: int, den: int) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def per_class_table(cm: ConfusionMatrix) -> list[PerClassRow]:
    counts = cm.counts
    total = cm.total
    rows = []
    for label in ClassLabel:
        k = int(label)
        tp = int(counts[k, k])
        fp = int(counts[:, k].sum()) - tp
        fn = int(counts[k, :].sum()) - tp
        tn = total - tp - fp - fn
        precision, no_precision = _ratio(tp, tp + fp)
        recall, no_recall = _ratio(tp, tp + fn)
        specificity, no_specificity = _ratio(tn, tn + fp)
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        rows.append(
            PerClassRow(
                label=label.label,
                precision=precision,
                recall=recall,
                f1=f1,
                specificity=specificity,
                support=tp + fn,
                undefined_precision=no_precision,
                undefined_recall=no_recall,
                undefined_specificity=no_specificity,
            )
        )
    return rows


def cohens_kappa(cm: ConfusionMatrix) -> float:
    total = cm.total
    observed = int(np.trace(cm.counts)) / total
    expected = sum(int(r) * int(c) for r, c in zip(cm.supports, cm.predicted_counts)) / total**2
    if expected == 1.0:
        return 0.0
    return (observed - expected) / (1.0 - expected)


def matthews_corrcoef(cm: ConfusionMatrix) -> float:
    """Multiclass MCC in its covariance form, computed on exact integers."""
    s = cm.total
    c = int(np.trace(cm.counts))
    p = [int(x) for x in cm.predicted_counts]
    t = [int(x) for x in cm.supports]
    numerator = c * s - sum(pk * tk for pk, tk in zip(p, t))
    denominator = (s * s - sum(pk * pk for pk in p)) * (s * s - sum(tk * tk for tk in t))
    if denominator == 0:
        return 0.0
    return numerator / math.sqrt(denominator)


def compute_metrics(
    cm: ConfusionMatrix, macro_auc_roc: Optional[float] = None, nll: Optional[float] = None
) -> MetricsReport:
    if cm.total == 0:
        raise ValueError("cannot compute metrics of an empty confusion matrix")
    rows = per_class_table(cm)
    for row in rows:
        if row.undefined_precision:
            LOGGER.warning("No predictions for class %s, precision reported as 0", row.label)
    macro_precision = sum(r.precision for r in rows) / N_CLASSES
    macro_recall = sum(r.recall for r in rows) / N_CLASSES
    macro_f1 = sum(r.f1 for r in rows) / N_CLASSES
    macro_specificity = sum(r.specificity for r in rows) / N_CLASSES
    return MetricsReport(
        accuracy=int(np.trace(cm.counts)) / cm.total,
        macro_precision=macro_precision,
        macro_recall=macro_recall,
        macro_f1=macro_f1,
        macro_auc_roc=macro_auc_roc,
        cohens_kappa=cohens_kappa(cm),
        balanced_accuracy=macro_recall,
        mcc=matthews_corrcoef(cm),
        macro_specificity=macro_specificity,
        g_mean=math.sqrt(macro_recall * macro_specificity),
        per_class=rows,
        support=cm.total,
        nll=nll,
    )


class RocCurve(NamedTuple):
    label: ClassLabel
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def binary_roc(positive, score) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ROC points (thresholds, fpr, tpr) with one point per distinct score.

    Tied scores enter the curve together.  A leading point at an
    infinite threshold pins the curve to (0, 0).
    """
    positive = np.asarray(positive, dtype=bool)
    score = np.asarray(score, dtype=np.float64)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both positive and negative samples")
    order = np.argsort(-score, kind="mergesort")
    ranked = score[order]
    hits = positive[order]
    tps = np.cumsum(hits)
    fps = np.cumsum(~hits)
    last = np.r_[np.flatnonzero(np.diff(ranked)), len(ranked) - 1]
    thresholds = np.r_[np.inf, ranked[last]]
    tpr = np.r_[0.0, tps[last] / n_pos]
    fpr = np.r_[0.0, fps[last] / n_neg]
    return thresholds, fpr, tpr


def roc_curve(labels: Mapping[str, ClassLabel], scores: PredictionSet, label: ClassLabel) -> RocCurve:
    """One-vs-rest ROC of ``label`` using that class's probability as score."""
    label = ClassLabel(label)
    check_same_ids(labels.keys(), scores.ids, "score")
    positive = np.array([labels[i] == label for i in scores.ids], dtype=bool)
    try:
        thresholds, fpr, tpr = binary_roc(positive, scores.probs()[:, int(label)])
    except ValueError:
        kind = "absent from" if not positive.any() else "the only class in"
        raise ValueError("class %s is %s the evaluated samples; ROC undefined" % (label.label, kind)) from None
    return RocCurve(label, thresholds, fpr, tpr, float(trapezoid(tpr, fpr)))


def roc_curves(labels: Mapping[str, ClassLabel], scores: PredictionSet) -> list[RocCurve]:
    return [roc_curve(labels, scores, label) for label in ClassLabel]


def macro_auc(labels: Mapping[str, ClassLabel], scores: PredictionSet) -> float:
    curves = roc_curves(labels, scores)
    return sum(c.auc for c in curves) / len(curves)


def model_summary(labels: Mapping[str, ClassLabel], pset: PredictionSet) -> dict[str, float]:
    """Accuracy and macro precision/recall/F1 of one prediction stream."""
    check_same_ids(labels.keys(), pset.ids, pset.model.value)
    y_true = [int(labels[i]) for i in pset.ids]
    report = compute_metrics(confusion_from_indices(y_true, argmax_index(pset.scores)))
    return {
        "accuracy": report.accuracy,
        "macro_precision": report.macro_precision,
        "macro_recall": report.macro_recall,
        "macro_f1": report.macro_f1,
    }


def _rounded(value):
    if isinstance(value, float):
        return round(value, 6)
    if isinstance(value, dict):
        return {k: _rounded(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_rounded(v) for v in value]
    return value


def write_metrics_json(report: MetricsReport, outfile: PathLike) -> None:
    write_json(_rounded(report.model_dump(mode="json", by_alias=True)), outfile)


def write_confusion_csv(cm: ConfusionMatrix, outfile: PathLike) -> None:
    write_csv(
        outfile,
        [""] + list(CLASS_NAMES),
        ([name] + [int(x) for x in row] for name, row in zip(CLASS_NAMES, cm.counts)),
    )


def write_per_class_csv(rows: list[PerClassRow], outfile: PathLike) -> None:
    write_csv(
        outfile,
        ["class", "precision", "recall", "f1", "specificity", "support"],
        (
            [r.label, fmt(r.precision), fmt(r.recall), fmt(r.f1), fmt(r.specificity), r.support]
            for r in rows
        ),
    )


def write_roc_csv(curve: RocCurve, outfile: PathLike) -> None:
    write_csv(
        outfile,
        ["threshold", "fpr", "tpr"],
        (
            ["inf" if math.isinf(t) else repr(float(t)), fmt(f), fmt(p)]
            for t, f, p in zip(curve.thresholds, curve.fpr, curve.tpr)
        ),
    )

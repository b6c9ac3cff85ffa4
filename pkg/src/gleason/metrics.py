"""
Tile-level evaluation: confusion matrix, one-vs-rest class metrics, macro
averages, derived binary tasks, and the weighted focal loss.

Undefined metrics (no positives, no negatives, empty denominators) are
``None`` throughout; they become ``null`` in JSON and ``n/a`` in text.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np
from scipy.stats import rankdata
from sklearn.metrics import confusion_matrix as _sk_confusion_matrix
from sklearn.metrics import roc_curve
from sklearn.utils.class_weight import compute_class_weight

from .annotation import MALIGNANT_CLASSES, MODEL_CLASSES, GleasonClass
from .errors import EmptyTaskError, MetricInputError

logger = logging.getLogger(__name__)

N_CLASSES = len(MODEL_CLASSES)
FOCAL_EPS = 1e-12

Task = Literal["cancer_detection", "fine_classification"]
HIGH_GRADE = frozenset({GleasonClass.GLEASON4, GleasonClass.GLEASON5})


def _ratio(numerator: float, denominator: float) -> float | None:
    return numerator / denominator if denominator > 0 else None


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with rows = truth, columns = prediction."""

    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_list(self) -> list[list[int]]:
        return [[int(v) for v in row] for row in self.counts]


@dataclass(frozen=True)
class ClassMetrics:
    """One-vs-rest metrics of a single class."""

    accuracy: float | None
    f1: float | None
    auc: float | None
    sensitivity: float | None
    specificity: float | None
    support: int
    roc: tuple[list[float], list[float]] | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "f1": self.f1,
            "auc": self.auc,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "support": self.support,
            "roc": None if self.roc is None else {"fpr": self.roc[0], "tpr": self.roc[1]},
        }


@dataclass(frozen=True)
class BinaryMetrics:
    accuracy: float | None
    sensitivity: float | None
    specificity: float | None
    n_tiles: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "n_tiles": self.n_tiles,
        }


@dataclass(frozen=True)
class FocalLossParams:
    """Per-class weights alpha and focusing exponent gamma."""

    alpha: tuple[float, ...] = (1.0,) * N_CLASSES
    gamma: float = 2.0

    def __post_init__(self):
        if len(self.alpha) != N_CLASSES or min(self.alpha) < 0:
            raise MetricInputError(f"alpha must be {N_CLASSES} weights >= 0")
        if self.gamma < 0:
            raise MetricInputError(f"gamma must be >= 0, got {self.gamma}")


def _labels_array(labels: Sequence[int], name: str) -> np.ndarray:
    array = np.asarray([int(label) for label in labels], dtype=np.int64)
    if array.size and (array.min() < 0 or array.max() >= N_CLASSES):
        raise MetricInputError(f"{name} contain labels outside the {N_CLASSES} model classes")
    return array


def confusion_matrix(preds: Sequence[int], truths: Sequence[int]) -> ConfusionMatrix:
    """
    6x6 confusion matrix, rows = truth.

    Raises:
        MetricInputError: Inputs are empty or of different length
    """
    if len(preds) != len(truths):
        raise MetricInputError(
            f"{len(preds)} predictions but {len(truths)} truths"
        )
    if not truths:
        raise MetricInputError("Cannot build a confusion matrix from no tiles")
    counts = _sk_confusion_matrix(
        _labels_array(truths, "truths"),
        _labels_array(preds, "predictions"),
        labels=list(range(N_CLASSES)),
    )
    return ConfusionMatrix(counts.astype(np.int64))


def auc_mann_whitney(scores: Sequence[float], positives: Sequence[bool]) -> float | None:
    """
    ROC AUC as the Mann-Whitney U statistic with midrank ties.

    Returns:
        AUC, or None without both positives and negatives
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores, method="average")
    u_statistic = ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_statistic / (n_pos * n_neg))


def per_class_metrics(
    cm: ConfusionMatrix,
    scores: np.ndarray | None,
    truths: Sequence[int],
    with_roc: bool = False,
) -> dict[GleasonClass, ClassMetrics]:
    """
    One-vs-rest accuracy, F1, AUC, sensitivity and specificity per class.

    Args:
        cm: Confusion matrix of the same tiles
        scores: N x 6 probabilities aligned with ``truths`` (None skips AUC)
        truths: True labels
        with_roc: Include ROC curve points

    Returns:
        ClassMetrics keyed by model class
    """
    truths = _labels_array(truths, "truths")
    if cm.total != truths.size:
        raise MetricInputError(
            f"Confusion matrix covers {cm.total} tiles, truths {truths.size}"
        )
    if scores is not None:
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != (truths.size, N_CLASSES):
            raise MetricInputError(
                f"Scores shape {scores.shape}, expected ({truths.size}, {N_CLASSES})"
            )

    counts = cm.counts
    total = cm.total
    results = {}
    for cls in MODEL_CLASSES:
        c = int(cls)
        tp = int(counts[c, c])
        fn = int(counts[c].sum()) - tp
        fp = int(counts[:, c].sum()) - tp
        tn = total - tp - fn - fp

        auc = None
        roc = None
        if scores is not None:
            positives = truths == c
            auc = auc_mann_whitney(scores[:, c], positives)
            if with_roc and auc is not None:
                fpr, tpr, _ = roc_curve(positives.astype(int), scores[:, c])
                roc = ([float(v) for v in fpr], [float(v) for v in tpr])

        results[cls] = ClassMetrics(
            accuracy=_ratio(tp + tn, total),
            f1=_ratio(2 * tp, 2 * tp + fp + fn),
            auc=auc,
            sensitivity=_ratio(tp, tp + fn),
            specificity=_ratio(tn, tn + fp),
            support=tp + fn,
            roc=roc,
        )
    return results


def macro_average(per_class: Sequence[float | None]) -> float:
    """
    Unweighted mean of the defined values.

    Raises:
        MetricInputError: No defined values
    """
    defined = [float(v) for v in per_class if v is not None and not math.isnan(v)]
    if not defined:
        raise MetricInputError("Macro average needs at least one defined value")
    return math.fsum(defined) / len(defined)


def _safe_macro(values: Sequence[float | None]) -> float | None:
    try:
        return macro_average(values)
    except MetricInputError:
        return None


def binary_task_metrics(
    preds: Sequence[int],
    truths: Sequence[int],
    task: Task,
    artefact_mode: Literal["exclude", "benign"] = "exclude",
    fine_scope: Literal["malignant", "all"] = "malignant",
) -> BinaryMetrics:
    """
    Accuracy, sensitivity and specificity of a derived two-class task.

    ``cancer_detection``: positive = Gleason 3/4/5, negative = Regular;
    artefact truths are excluded (``artefact_mode="exclude"``) or counted as
    negative (``"benign"``). ``fine_classification``: positive = Gleason 4/5,
    negative = Gleason 3, over tiles whose truth is malignant
    (``fine_scope="malignant"``) or over all tiles (``"all"``). Predictions
    are positive iff their class is in the task's positive set.

    Raises:
        EmptyTaskError: No tiles remain after exclusion
    """
    if len(preds) != len(truths):
        raise MetricInputError(f"{len(preds)} predictions but {len(truths)} truths")

    if task == "cancer_detection":
        positive_set = MALIGNANT_CLASSES

        def included(truth: GleasonClass) -> bool:
            return artefact_mode == "benign" or not truth.is_artefact

    elif task == "fine_classification":
        positive_set = HIGH_GRADE

        def included(truth: GleasonClass) -> bool:
            return fine_scope == "all" or truth in MALIGNANT_CLASSES

    else:
        raise MetricInputError(f"Unknown binary task {task!r}")

    tp = tn = fp = fn = 0
    for pred, truth in zip(preds, truths, strict=True):
        truth = GleasonClass(int(truth))
        if not included(truth):
            continue
        actual = truth in positive_set
        predicted = GleasonClass(int(pred)) in positive_set
        if actual and predicted:
            tp += 1
        elif actual:
            fn += 1
        elif predicted:
            fp += 1
        else:
            tn += 1

    n_tiles = tp + tn + fp + fn
    if n_tiles == 0:
        raise EmptyTaskError(f"No tiles remain for {task} after exclusion")
    return BinaryMetrics(
        accuracy=(tp + tn) / n_tiles,
        sensitivity=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp),
        n_tiles=n_tiles,
    )


def focal_loss(
    probs: Sequence[float], truth: int, params: FocalLossParams | None = None
) -> float:
    """``-alpha[t] * (1 - p_t)^gamma * ln(p_t)`` with p_t clamped to [1e-12, 1]."""
    params = params or FocalLossParams()
    p_t = min(max(float(probs[int(truth)]), FOCAL_EPS), 1.0)
    return -params.alpha[int(truth)] * (1.0 - p_t) ** params.gamma * math.log(p_t)


def balanced_class_weights(labels: Sequence[int]) -> tuple[float, ...]:
    """Inverse-frequency focal-loss alpha; classes absent from ``labels`` get 0."""
    labels = _labels_array(labels, "labels")
    if labels.size == 0:
        raise MetricInputError("Cannot derive class weights from no labels")
    present = np.unique(labels)
    weights = compute_class_weight("balanced", classes=present, y=labels)
    alpha = [0.0] * N_CLASSES
    for cls, weight in zip(present, weights, strict=True):
        alpha[int(cls)] = float(weight)
    return tuple(alpha)


@dataclass
class MetricsReport:
    """Full evaluation of one prediction set."""

    confusion: ConfusionMatrix
    per_class: dict[GleasonClass, ClassMetrics]
    macro: dict[str, float | None]
    binary_tasks: dict[str, BinaryMetrics | None]
    settings: dict[str, Any] = field(default_factory=dict)
    unmatched: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "classes": [cls.label for cls in MODEL_CLASSES],
            "n_tiles": self.confusion.total,
            "confusion_matrix": self.confusion.to_list(),
            "per_class": {cls.label: m.to_dict() for cls, m in self.per_class.items()},
            "macro": dict(self.macro),
            "binary_tasks": {
                name: None if m is None else m.to_dict()
                for name, m in self.binary_tasks.items()
            },
            "settings": dict(self.settings),
            "unmatched": dict(self.unmatched),
        }

    def to_text(self) -> str:
        """Plain-text table: per-class rows, macro row, binary-task rows."""

        def fmt(value: float | None) -> str:
            return "n/a" if value is None else f"{value:.3f}"

        header = f"{'Class':<18}{'Acc':>8}{'F1':>8}{'AUC':>8}{'Sens':>8}{'Spec':>8}{'N':>8}"
        lines = [header, "-" * len(header)]
        for cls, m in self.per_class.items():
            lines.append(
                f"{cls.label:<18}{fmt(m.accuracy):>8}{fmt(m.f1):>8}{fmt(m.auc):>8}"
                f"{fmt(m.sensitivity):>8}{fmt(m.specificity):>8}{m.support:>8}"
            )
        lines.append("-" * len(header))
        lines.append(
            f"{'Macro':<18}{fmt(self.macro['accuracy']):>8}{fmt(self.macro['f1']):>8}"
            f"{fmt(self.macro['auc']):>8}{fmt(self.macro['sensitivity']):>8}"
            f"{fmt(self.macro['specificity']):>8}{self.confusion.total:>8}"
        )
        lines.append("")
        task_header = f"{'Binary task':<26}{'Acc':>8}{'Sens':>8}{'Spec':>8}{'N':>8}"
        lines += [task_header, "-" * len(task_header)]
        names = {
            "cancer_detection": "Benign vs Malignant",
            "fine_classification": "Gleason 3 vs Gleason 4&5",
        }
        for name, m in self.binary_tasks.items():
            title = names.get(name, name)
            if m is None:
                lines.append(f"{title:<26}{'n/a':>8}{'n/a':>8}{'n/a':>8}{0:>8}")
            else:
                lines.append(
                    f"{title:<26}{fmt(m.accuracy):>8}{fmt(m.sensitivity):>8}"
                    f"{fmt(m.specificity):>8}{m.n_tiles:>8}"
                )
        return "\n".join(lines) + "\n"


def evaluate_predictions(
    preds: Sequence[int],
    truths: Sequence[int],
    scores: np.ndarray | None = None,
    artefact_mode: Literal["exclude", "benign"] = "exclude",
    fine_scope: Literal["malignant", "all"] = "malignant",
    with_roc: bool = True,
) -> MetricsReport:
    """Build the full report from aligned predictions, truths and scores."""
    cm = confusion_matrix(preds, truths)
    per_class = per_class_metrics(cm, scores, truths, with_roc=with_roc)
    macro = {
        name: _safe_macro([getattr(m, name) for m in per_class.values()])
        for name in ("accuracy", "f1", "auc", "sensitivity", "specificity")
    }

    binary_tasks: dict[str, BinaryMetrics | None] = {}
    for task in ("cancer_detection", "fine_classification"):
        try:
            binary_tasks[task] = binary_task_metrics(
                preds, truths, task, artefact_mode, fine_scope
            )
        except EmptyTaskError as e:
            logger.warning(f"{e}; reported as n/a")
            binary_tasks[task] = None

    return MetricsReport(
        confusion=cm,
        per_class=per_class,
        macro=macro,
        binary_tasks=binary_tasks,
        settings={"artefact_mode": artefact_mode, "fine_scope": fine_scope},
    )

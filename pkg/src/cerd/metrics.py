"""Classification metrics: accuracy, macro-F1 and macro one-vs-rest AUC."""

from __future__ import annotations

import warnings

import numpy as np
from scipy.stats import rankdata


def accuracy(labels, predicted) -> float:
    labels, predicted = np.asarray(labels), np.asarray(predicted)
    return float(np.mean(labels == predicted))


def macro_f1(labels, predicted, num_classes: int) -> float:
    """Unweighted mean of per-class F1; a class with no support and no predictions scores 0."""
    labels, predicted = np.asarray(labels), np.asarray(predicted)
    scores = []
    for c in range(num_classes):
        tp = np.sum((predicted == c) & (labels == c))
        fp = np.sum((predicted == c) & (labels != c))
        fn = np.sum((predicted != c) & (labels == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def binary_auc(positive: np.ndarray, scores: np.ndarray) -> float:
    """Mann-Whitney AUC with ties counted as one half."""
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_ovr_auc(labels, scores) -> float:
    """Mean over classes of the one-vs-rest AUC.

    Classes that are absent (or are the only class present) have no defined
    AUC and are left out of the mean with a warning.
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    aucs = []
    for c in range(scores.shape[1]):
        pos = labels == c
        if pos.all() or not pos.any():
            warnings.warn(f"class {c} has no one-vs-rest AUC on this split; excluded from the macro mean")
            continue
        aucs.append(binary_auc(pos, scores[:, c]))
    return float(np.mean(aucs)) if aucs else float("nan")


def classification_metrics(labels, scores) -> dict[str, float]:
    scores = np.asarray(scores, dtype=np.float64)
    predicted = np.argmax(scores, axis=1)
    return {
        "acc": accuracy(labels, predicted),
        "f1": macro_f1(labels, predicted, scores.shape[1]),
        "auc": macro_ovr_auc(labels, scores),
    }

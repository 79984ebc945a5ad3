"""ERC evaluation metrics computed from a confusion matrix."""

from __future__ import annotations

import warnings
from collections.abc import Sequence

import numpy as np

from .corpus import EmotionLabelSet
from .numerics import ContractError


def _as_indices(values: Sequence, labels: EmotionLabelSet) -> np.ndarray:
    return np.array([v if isinstance(v, (int, np.integer)) else labels.index(v) for v in values], dtype=np.int64)


def confusion_matrix(pred: Sequence, gold: Sequence, labels: EmotionLabelSet) -> np.ndarray:
    """Counts with gold classes on rows and predicted classes on columns.

    Entries of ``pred``/``gold`` may be label names or class indices.
    """
    if len(pred) != len(gold):
        raise ContractError(f"pred has {len(pred)} items but gold has {len(gold)}")
    if len(gold) == 0:
        raise ContractError("metrics need at least one item")
    p = _as_indices(pred, labels)
    g = _as_indices(gold, labels)
    cm = np.zeros((len(labels), len(labels)), dtype=np.int64)
    np.add.at(cm, (g, p), 1)
    return cm


def per_class_f1(cm: np.ndarray) -> np.ndarray:
    tp = np.diag(cm).astype(float)
    pred_n = cm.sum(axis=0).astype(float)
    gold_n = cm.sum(axis=1).astype(float)
    denom = pred_n + gold_n
    # F1 = 2TP / (2TP + FP + FN) = 2TP / (|pred| + |gold|)
    return np.divide(2.0 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def weighted_f1_from_confusion(cm: np.ndarray) -> float:
    support = cm.sum(axis=1).astype(float)
    return float((per_class_f1(cm) * support).sum() / support.sum())


def micro_f1_from_confusion(cm: np.ndarray, neutral_index: int) -> float:
    keep = np.ones(cm.shape[0], dtype=bool)
    keep[neutral_index] = False
    tp = float(np.diag(cm)[keep].sum())
    pred_pos = float(cm[:, keep].sum())
    gold_pos = float(cm[keep, :].sum())
    if pred_pos == 0 and gold_pos == 0:
        warnings.warn("no non-neutral predictions or gold labels; micro-F1 defined as 0.0", RuntimeWarning, stacklevel=2)
        return 0.0
    if tp == 0:
        return 0.0
    precision, recall = tp / pred_pos, tp / gold_pos
    return 2.0 * precision * recall / (precision + recall)


def weighted_f1(pred: Sequence, gold: Sequence, labels: EmotionLabelSet) -> float:
    """Per-class F1 averaged with weights proportional to gold support."""
    return weighted_f1_from_confusion(confusion_matrix(pred, gold, labels))


def micro_f1_excluding_neutral(pred: Sequence, gold: Sequence, labels: EmotionLabelSet) -> float:
    """Micro-F1 over the non-neutral classes (DailyDialog convention).

    Neutral predictions and neutral golds never count as true positives; a
    non-neutral gold predicted as another non-neutral class is both a false
    positive and a false negative.
    """
    if labels.neutral_index is None:
        raise ContractError("label set has no neutral class")
    return micro_f1_from_confusion(confusion_matrix(pred, gold, labels), labels.neutral_index)

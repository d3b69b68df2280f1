"""Ranking and threshold metrics for binary and multi-output classifiers.

All rank metrics group tied scores: thresholds are the distinct score values,
and tied pairs count 1/2 in AUROC. Inputs are plain numpy arrays; scores are
any real-valued rankings (probabilities included), labels are 0/1.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "auprc",
    "auroc",
    "f1_score",
    "min_se_pplus",
    "macro_micro_roc",
    "MetricsReport",
    "compute_report",
]


def _validate_pair(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or y.ndim != 1 or s.shape != y.shape:
        raise ValueError(f"scores and labels must be matching 1-D arrays, got {s.shape} and {y.shape}")
    if s.size == 0:
        raise ValueError("empty input")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(np.float64)


def _require_both_classes(y: np.ndarray) -> None:
    pos = y.sum()
    if pos == 0 or pos == y.size:
        raise ValueError("degenerate labels: need at least one positive and one negative")


def _threshold_counts(s: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (tp, fp) at each distinct score threshold, descending.

    Entry i counts predictions with score >= the i-th largest distinct value.
    """
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    ends = np.append(np.nonzero(np.diff(s_sorted))[0], s.size - 1)
    tp = np.cumsum(y_sorted)[ends]
    fp = (ends + 1.0) - tp
    return tp, fp


def auprc(scores, labels) -> float:
    """Average precision: sum of precision-weighted recall increments."""
    s, y = _validate_pair(scores, labels)
    _require_both_classes(y)
    tp, fp = _threshold_counts(s, y)
    pos = y.sum()
    recall = tp / pos
    precision = tp / (tp + fp)
    prev = np.concatenate(([0.0], recall[:-1]))
    return float(np.sum((recall - prev) * precision))


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the rank statistic; ties count 1/2."""
    s, y = _validate_pair(scores, labels)
    _require_both_classes(y)
    order = np.argsort(s, kind="stable")
    s_sorted = s[order]
    n = s.size
    change = np.nonzero(np.diff(s_sorted))[0]
    starts = np.concatenate(([0], change + 1))
    ends = np.concatenate((change, [n - 1]))
    avg_rank = (starts + ends) / 2.0 + 1.0
    ranks = np.repeat(avg_rank, ends - starts + 1)
    pos = y.sum()
    neg = n - pos
    rank_sum = ranks[y[order] == 1.0].sum()
    return float((rank_sum - pos * (pos + 1) / 2.0) / (pos * neg))


def f1_score(scores, labels, threshold: float = 0.5) -> float:
    """F1 of the hard classifier predicting positive at score >= threshold."""
    s, y = _validate_pair(scores, labels)
    pred = s >= threshold
    tp = float(np.sum(pred & (y == 1.0)))
    fp = float(np.sum(pred & (y == 0.0)))
    fn = float(np.sum(~pred & (y == 1.0)))
    denom = 2 * tp + fp + fn
    if denom == 0.0:
        return 0.0
    return 2 * tp / denom


def min_se_pplus(scores, labels) -> float:
    """Max over thresholds of min(sensitivity, positive predictive value)."""
    s, y = _validate_pair(scores, labels)
    _require_both_classes(y)
    tp, fp = _threshold_counts(s, y)
    se = tp / y.sum()
    pplus = tp / (tp + fp)
    return float(np.max(np.minimum(se, pplus)))


def macro_micro_roc(scores, labels) -> tuple[float, float]:
    """(ma-ROC, mi-ROC) over label columns.

    ma-ROC averages the per-column AUROC, skipping single-class columns with
    a warning; mi-ROC is AUROC over the flattened score/label pairs.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 2 or s.shape != y.shape:
        raise ValueError(f"expected matching 2-D arrays, got {s.shape} and {np.shape(y)}")
    per_column = []
    for k in range(s.shape[1]):
        col = y[:, k]
        if col.sum() in (0, col.size):
            warnings.warn(f"label column {k} has a single class, skipped in ma-ROC", stacklevel=2)
            continue
        per_column.append(auroc(s[:, k], col))
    if not per_column:
        raise ValueError("all label columns are degenerate")
    ma = float(np.mean(per_column))
    mi = auroc(s.ravel(), y.ravel())
    return ma, mi


@dataclass
class MetricsReport:
    """Evaluation metrics for one model on one split; inapplicable entries are None."""

    task: str
    n: int
    auprc: float | None = None
    auroc: float | None = None
    f1: float | None = None
    min_se_pplus: float | None = None
    ma_roc: float | None = None
    mi_roc: float | None = None
    f1_threshold: float = 0.5

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "auprc": self.auprc,
            "auroc": self.auroc,
            "f1": self.f1,
            "min_se_pplus": self.min_se_pplus,
            "ma_roc": self.ma_roc,
            "mi_roc": self.mi_roc,
            "n": self.n,
            "f1_threshold": self.f1_threshold,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, payload: dict) -> "MetricsReport":
        return cls(
            task=payload["task"],
            n=int(payload["n"]),
            auprc=payload.get("auprc"),
            auroc=payload.get("auroc"),
            f1=payload.get("f1"),
            min_se_pplus=payload.get("min_se_pplus"),
            ma_roc=payload.get("ma_roc"),
            mi_roc=payload.get("mi_roc"),
            f1_threshold=payload.get("f1_threshold", 0.5),
        )


def compute_report(scores, labels, task: str, f1_threshold: float = 0.5) -> MetricsReport:
    """Score predictions for one task kind.

    binary: 1-D scores and 0/1 labels. multilabel: (n, K) scores and 0/1
    label matrix. multiclass: (n, K) scores and integer labels, reported via
    one-vs-rest columns.
    """
    if task == "binary":
        s = np.asarray(scores, dtype=np.float64).reshape(-1)
        y = np.asarray(labels).reshape(-1)
        return MetricsReport(
            task=task,
            n=s.size,
            auprc=auprc(s, y),
            auroc=auroc(s, y),
            f1=f1_score(s, y, threshold=f1_threshold),
            min_se_pplus=min_se_pplus(s, y),
            f1_threshold=f1_threshold,
        )
    if task == "multilabel":
        s = np.asarray(scores, dtype=np.float64)
        y = np.asarray(labels)
        ma, mi = macro_micro_roc(s, y)
        return MetricsReport(task=task, n=s.shape[0], ma_roc=ma, mi_roc=mi, f1_threshold=f1_threshold)
    if task == "multiclass":
        s = np.asarray(scores, dtype=np.float64)
        y = np.asarray(labels).reshape(-1).astype(np.intp)
        onehot = np.zeros_like(s)
        onehot[np.arange(y.size), y] = 1.0
        ma, mi = macro_micro_roc(s, onehot)
        return MetricsReport(task=task, n=s.shape[0], ma_roc=ma, mi_roc=mi, f1_threshold=f1_threshold)
    raise ValueError(f"unknown task kind: {task!r}")

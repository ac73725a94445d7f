"""
Classification metrics

Accuracy plus macro-averaged precision, recall and F1. Classes that appear
in neither the labels nor the predictions score 0 and still count in the
macro averages, so small splits are never flattered by missing classes.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
from sklearn.metrics import accuracy_score, confusion_matrix, precision_recall_fscore_support

METRIC_NAMES = ("accuracy", "macro_precision", "macro_recall", "macro_f1")


@dataclass
class MetricsReport:
    """Metrics of one evaluated split"""
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    precision: List[float]
    recall: List[float]
    f1: List[float]
    support: List[int]
    confusion: List[List[int]]
    count: int

    @property
    def num_classes(self) -> int:
        return len(self.confusion)

    def headline(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}

    def to_dict(self) -> dict:
        return {
            **self.headline(),
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "support": self.support,
            "confusion": self.confusion,
            "count": self.count,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        return cls(**{k: data[k] for k in (*METRIC_NAMES, "precision", "recall", "f1",
                                           "support", "confusion", "count")})


def compute_metrics(labels: Sequence[int], predictions: Sequence[int], num_classes: int) -> MetricsReport:
    """Metrics over all classes 0..num_classes-1"""
    y_true = np.asarray(labels, dtype=np.int64)
    y_pred = np.asarray(predictions, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"{len(y_true)} labels but {len(y_pred)} predictions")
    class_ids = list(range(num_classes))

    if y_true.size == 0:
        zeros = [0.0] * num_classes
        return MetricsReport(0.0, 0.0, 0.0, 0.0, zeros, list(zeros), list(zeros), [0] * num_classes,
                             [[0] * num_classes for _ in class_ids], 0)

    precision, recall, f1, support = precision_recall_fscore_support(
        y_true, y_pred, labels=class_ids, average=None, zero_division=0)
    matrix = confusion_matrix(y_true, y_pred, labels=class_ids)
    return MetricsReport(
        accuracy=float(accuracy_score(y_true, y_pred)),
        macro_precision=float(np.mean(precision)),
        macro_recall=float(np.mean(recall)),
        macro_f1=float(np.mean(f1)),
        precision=[float(x) for x in precision],
        recall=[float(x) for x in recall],
        f1=[float(x) for x in f1],
        support=[int(x) for x in support],
        confusion=matrix.astype(int).tolist(),
        count=int(y_true.size),
    )


@dataclass
class SeedSummary:
    """Per-seed headline metrics with their mean and sample standard deviation"""
    per_seed: Dict[int, Dict[str, float]] = field(default_factory=dict)

    def add(self, seed: int, report: MetricsReport):
        self.per_seed[seed] = report.headline()

    def mean(self) -> Dict[str, float]:
        return {m: float(np.mean([v[m] for v in self.per_seed.values()])) for m in METRIC_NAMES}

    def std(self) -> Dict[str, float]:
        if len(self.per_seed) < 2:
            return {m: 0.0 for m in METRIC_NAMES}
        return {m: float(np.std([v[m] for v in self.per_seed.values()], ddof=1)) for m in METRIC_NAMES}

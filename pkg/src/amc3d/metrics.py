"""Ranking and threshold metrics for binary and per-class evaluation."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError


def _binary_inputs(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ContractError(f"{s.size} scores but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ContractError("labels must be 0/1")
    y = y.astype(bool)
    if y.all() or not y.any():
        raise ContractError("both classes must be present")
    return s, y


def compute_auroc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative (ties count ½)."""
    s, y = _binary_inputs(scores, labels)
    ranks = rankdata(s)
    n_pos, n_neg = y.sum(), (~y).sum()
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """False/true positive rates at every distinct threshold, from (0,0) to (1,1)."""
    s, y = _binary_inputs(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    distinct = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[distinct]
    fps = (distinct + 1) - tps
    tpr = np.r_[0.0, tps / y.sum()]
    fpr = np.r_[0.0, fps / (~y).sum()]
    return fpr, tpr, np.r_[np.inf, s[distinct]]


def trapezoid_auroc(scores, labels) -> float:
    fpr, tpr, _ = roc_curve(scores, labels)
    return float(np.trapezoid(tpr, fpr))


@dataclass
class OperatingPoint:
    threshold: float
    sensitivity: float
    specificity: float
    accuracy: float

    @property
    def youden_j(self) -> float:
        return self.sensitivity + self.specificity - 1.0


def operating_point(scores, labels, threshold: float) -> OperatingPoint:
    s, y = _binary_inputs(scores, labels)
    pred = s >= threshold
    sens = float((pred & y).sum() / y.sum())
    spec = float((~pred & ~y).sum() / (~y).sum())
    return OperatingPoint(float(threshold), sens, spec, float((pred == y).mean()))


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    """Midpoints between adjacent distinct scores plus one point beyond each end."""
    u = np.unique(scores)
    mids = (u[:-1] + u[1:]) / 2
    pad = max(1.0, float(np.abs(u).max()))
    return np.r_[u[0] - pad, mids, u[-1] + pad]


def youden_threshold(scores, labels) -> OperatingPoint:
    """Threshold maximising sensitivity + specificity − 1.

    Ties go to the higher sensitivity, then to the lower threshold.
    """
    s, y = _binary_inputs(scores, labels)
    best, key = None, None
    for t in candidate_thresholds(s):
        op = operating_point(s, y, t)
        k = (round(op.youden_j, 12), op.sensitivity, -t)
        if key is None or k > key:
            best, key = op, k
    return best


def f1_score(pred: np.ndarray, labels: np.ndarray) -> float:
    pred, y = np.asarray(pred, bool), np.asarray(labels, bool)
    tp = (pred & y).sum()
    denom = 2 * tp + (pred & ~y).sum() + (~pred & y).sum()
    return float(2 * tp / denom) if denom else 0.0


@dataclass
class ClassMetrics:
    name: str
    auroc: float
    threshold: float
    accuracy: float
    sensitivity: float
    specificity: float
    f1: float


@dataclass
class MetricsReport:
    classes: list[ClassMetrics] = field(default_factory=list)

    @property
    def macro(self) -> dict[str, float]:
        keys = ("auroc", "accuracy", "sensitivity", "specificity", "f1")
        return {k: float(np.mean([getattr(c, k) for c in self.classes])) for k in keys}

    def to_dict(self) -> dict:
        return {"classes": [asdict(c) for c in self.classes], "macro": self.macro}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def metrics_report(scores, labels, class_names=None, thresholds="youden") -> MetricsReport:
    """Per-class metrics; ``thresholds`` is ``"youden"``, a float, or a per-class sequence."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim == 1:
        s, y = s[:, None], y.reshape(-1, 1)
    if s.shape != y.shape:
        raise ContractError(f"scores {s.shape} and labels {y.shape} differ")
    k = s.shape[1]
    names = list(class_names) if class_names is not None else [f"class{i}" for i in range(k)]
    report = MetricsReport()
    for c in range(k):
        if thresholds == "youden":
            op = youden_threshold(s[:, c], y[:, c])
        else:
            t = thresholds if np.isscalar(thresholds) else thresholds[c]
            op = operating_point(s[:, c], y[:, c], float(t))
        f1 = f1_score(s[:, c] >= op.threshold, y[:, c])
        report.classes.append(ClassMetrics(names[c], compute_auroc(s[:, c], y[:, c]), op.threshold,
                                           op.accuracy, op.sensitivity, op.specificity, f1))
    return report

"""Per-class Platt scaling anchored at the F1-optimal operating point, and ensembling."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit, log_expit

from .errors import CalibrationError, ContractError
from .metrics import candidate_thresholds, f1_score


@dataclass
class PlattParams:
    a: np.ndarray           # per-class slope
    b: np.ndarray           # per-class intercept
    threshold: np.ndarray   # F1-optimal raw threshold t* per class

    def __post_init__(self):
        self.a = np.atleast_1d(np.asarray(self.a, dtype=np.float64))
        self.b = np.atleast_1d(np.asarray(self.b, dtype=np.float64))
        self.threshold = np.atleast_1d(np.asarray(self.threshold, dtype=np.float64))
        if not (self.a.shape == self.b.shape == self.threshold.shape):
            raise ContractError("Platt parameters must have one entry per class")

    @property
    def num_classes(self) -> int:
        return self.a.size

    @classmethod
    def identity(cls, k: int) -> "PlattParams":
        return cls(np.ones(k), np.zeros(k), np.zeros(k))

    def to_dict(self) -> dict:
        return {"a": self.a.tolist(), "b": self.b.tolist(), "threshold": self.threshold.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PlattParams":
        return cls(d["a"], d["b"], d["threshold"])


def f1_optimal_threshold(z, y) -> float:
    """Raw threshold maximising F1 of ``z >= t``; ties go to the higher threshold."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y).astype(bool)
    best_t, best_f1 = None, -1.0
    for t in candidate_thresholds(z)[::-1]:
        f1 = f1_score(z >= t, y)
        if f1 > best_f1:
            best_t, best_f1 = t, f1
    return float(best_t)


def _logistic_fit(z: np.ndarray, target: np.ndarray, max_iter: int = 100,
                  tol: float = 1e-8) -> tuple[float, float]:
    """Maximum-likelihood ``sigmoid(a·z + b)`` for soft targets by damped Newton steps."""
    a, b = 0.0, float(np.log((target.sum() + 1e-12) / (len(target) - target.sum() + 1e-12)))

    def nll(a_, b_):
        s = a_ * z + b_
        return -float(np.sum(target * log_expit(s) + (1 - target) * log_expit(-s)))

    f = nll(a, b)
    for _ in range(max_iter):
        p = expit(a * z + b)
        r = p - target
        w = p * (1 - p)
        g = np.array([np.dot(r, z), r.sum()])
        Hm = np.array([[np.dot(w, z * z), np.dot(w, z)], [np.dot(w, z), w.sum()]])
        Hm += 1e-12 * np.eye(2)
        step = np.linalg.solve(Hm, g)
        lam = 1.0
        while True:
            a_new, b_new = a - lam * step[0], b - lam * step[1]
            f_new = nll(a_new, b_new)
            if f_new <= f + 1e-4 * lam * (-g @ step) or lam < 1e-10:
                break
            lam /= 2
        change = max(abs(a_new - a), abs(b_new - b))
        a, b, f = a_new, b_new, f_new
        if change < tol:
            break
    return a, b


def fit_platt(z, y, max_iter: int = 100, tol: float = 1e-8) -> PlattParams:
    """Fit per-class ``sigmoid(a_c·z_c + b_c)`` whose 0.5 point sits at the F1-optimal threshold.

    The slope comes from a logistic fit on Platt's smoothed targets; the
    intercept is then set to ``-a_c·t*``.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y)
    if z.ndim == 1:
        z, y = z[:, None], y.reshape(-1, 1)
    if z.shape != y.shape:
        raise ContractError(f"logits {z.shape} and labels {y.shape} differ")
    if not np.isin(y, (0, 1)).all():
        raise ContractError("labels must be 0/1")
    a, b, t = [], [], []
    for c in range(z.shape[1]):
        yc = y[:, c].astype(bool)
        n_pos, n_neg = int(yc.sum()), int((~yc).sum())
        if n_pos == 0 or n_neg == 0:
            raise CalibrationError(f"class {c}: calibration needs both positives and negatives")
        t_star = f1_optimal_threshold(z[:, c], yc)
        target = np.where(yc, (n_pos + 1) / (n_pos + 2), 1 / (n_neg + 2))
        slope, _ = _logistic_fit(z[:, c], target, max_iter, tol)
        if slope <= 0:
            warnings.warn(f"class {c}: fitted Platt slope {slope:.4g} is not positive", stacklevel=2)
        a.append(slope)
        b.append(-(slope * t_star))
        t.append(t_star)
    return PlattParams(np.array(a), np.array(b), np.array(t))


def calibrated_logits(z, params: PlattParams) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != params.num_classes:
        raise ContractError(f"logits have {z.shape[-1]} classes, calibration has {params.num_classes}")
    return params.a * z + params.b


def apply_calibration(z, params: PlattParams) -> np.ndarray:
    return expit(calibrated_logits(z, params))


def ensemble_logits(members: Sequence) -> np.ndarray:
    """Per-class arithmetic mean of member outputs."""
    if len(members) == 0:
        raise ContractError("ensemble needs at least one member")
    arrays = [np.asarray(m, dtype=np.float64) for m in members]
    if any(a.shape != arrays[0].shape for a in arrays):
        raise ContractError(f"ensemble members have ragged shapes {[a.shape for a in arrays]}")
    if len(arrays) == 1:
        return arrays[0].copy()
    return np.mean(np.stack(arrays), axis=0)

"""Confusion counts, F-beta scores and decision-threshold calibration.

Prediction rule everywhere: ``score >= threshold`` means failure (positive).
Undefined ratios (zero denominators) are reported as 0.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyInput, InvalidArgument, InvalidLabel, SingleClassError


@dataclass(frozen=True)
class ScoredSample:
    score: float
    label: int


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    f2: float
    threshold_used: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _arrays(samples, labels=None) -> tuple[np.ndarray, np.ndarray]:
    if labels is None:
        samples = list(samples)
        scores = np.array([s.score for s in samples], dtype=np.float64)
        labels = np.array([s.label for s in samples])
    else:
        scores = np.asarray(samples, dtype=np.float64)
        labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise InvalidArgument("scores and labels must be equal-length 1-D sequences")
    if scores.size == 0:
        raise EmptyInput("no samples")
    if not np.all((labels == 0) | (labels == 1)):
        raise InvalidLabel("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def confusion(samples: Sequence[ScoredSample] | Sequence[float], threshold: float, labels=None) -> Confusion:
    """Counts at ``threshold``; accepts ScoredSample objects or (scores, labels)."""
    if not 0 <= threshold <= 1:
        raise InvalidArgument(f"threshold must be in [0, 1], got {threshold}")
    scores, y = _arrays(samples, labels)
    pred = scores >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    return Confusion(tp, fp, fn, tn)


def precision_recall(c: Confusion) -> tuple[float, float]:
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    return precision, recall


def fbeta(precision: float, recall: float, beta: float = 2.0) -> float:
    if beta <= 0:
        raise InvalidArgument("beta must be positive")
    b2 = beta * beta
    denom = b2 * precision + recall
    if denom == 0:
        return 0.0
    return (1 + b2) * precision * recall / denom


def report(c: Confusion, threshold: float) -> MetricsReport:
    p, r = precision_recall(c)
    return MetricsReport(c.tp, c.fp, c.fn, c.tn, p, r, fbeta(p, r, 1.0), fbeta(p, r, 2.0), float(threshold))


def evaluate_scores(scores, labels, threshold: float) -> MetricsReport:
    return report(confusion(scores, threshold, labels), threshold)


def candidate_thresholds(scores) -> np.ndarray:
    """Distinct scores, midpoints between neighbours, and the bounds 0 and 1."""
    distinct = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (distinct[:-1] + distinct[1:]) / 2
    return np.unique(np.concatenate([distinct, mids, [0.0, 1.0]]))


def calibrate_threshold(samples, labels=None, beta: float = 2.0) -> tuple[float, float]:
    """Threshold maximizing F-beta over the candidate set; lowest threshold wins ties."""
    scores, y = _arrays(samples, labels)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise SingleClassError("threshold calibration needs both classes")
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    # positives/negatives with score >= t, via suffix sums over the sorted scores
    pos_suffix = np.concatenate([np.cumsum(y[order][::-1])[::-1], [0]])
    neg_suffix = np.concatenate([np.cumsum(1 - y[order][::-1])[::-1], [0]])

    best_t, best_f = 0.0, -1.0
    for t in candidate_thresholds(scores):
        if not 0 <= t <= 1:
            continue
        k = int(np.searchsorted(sorted_scores, t, side="left"))
        c = Confusion(int(pos_suffix[k]), int(neg_suffix[k]), n_pos - int(pos_suffix[k]), 0)
        p, r = precision_recall(c)
        f = fbeta(p, r, beta)
        if f > best_f:
            best_t, best_f = float(t), f
    return best_t, best_f

"""Core-level classification metrics and patient-grouped folds.

Positive class is any core with involvement > 0.  A score above a threshold
is a positive call; a score at or below it is negative.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from cinelab.rng import stream

HIGH_INVOLVEMENT = 0.35
SPECIFICITIES = (0.20, 0.40, 0.60)


class MetricError(ValueError):
    pass


@dataclass
class ScoredCore:
    record: object  # CoreRecord
    score: float

    @property
    def positive(self) -> bool:
        return self.record.involvement > 0


def _split(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape or s.ndim != 1:
        raise MetricError(f"scores {s.shape} and labels {y.shape} must be matching 1-d arrays")
    if not np.all(np.isfinite(s)):
        raise MetricError("scores must be finite")
    if not y.any():
        raise MetricError("no positive cores (involvement > 0) in input")
    if y.all():
        raise MetricError("no negative (benign) cores in input")
    return s, y


def unpack(scored) -> tuple[np.ndarray, np.ndarray]:
    """(scores, labels) from a list of :class:`ScoredCore`."""
    return (np.array([c.score for c in scored], dtype=np.float64),
            np.array([c.positive for c in scored], dtype=bool))


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate of P(positive outscores negative), ties counting 1/2."""
    s, y = _split(scores, labels)
    ranks = rankdata(s)  # average ranks resolve ties as half wins
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def specificity_threshold(scores, labels, target_spec: float) -> float:
    """Smallest negative score t with fraction(negatives <= t) >= target."""
    if not 0.0 < target_spec < 1.0:
        raise MetricError(f"target specificity {target_spec} outside (0, 1)")
    s, y = _split(scores, labels)
    neg = np.sort(s[~y])
    need = int(np.ceil(target_spec * len(neg) - 1e-9))
    return float(neg[max(need, 1) - 1])


def sensitivity_at_specificity(scores, labels, target_spec: float) -> float:
    s, y = _split(scores, labels)
    t = specificity_threshold(s, y, target_spec)
    return float(np.mean(s[y] > t))


def balanced_accuracy(scores, labels, threshold: float) -> float:
    s, y = _split(scores, labels)
    pred = s > threshold
    sens = np.mean(pred[y])
    spec = np.mean(~pred[~y])
    return float((sens + spec) / 2.0)


def choose_threshold(scores, labels) -> float:
    """Threshold maximising Youden's J, ties going to the lower threshold.

    Candidates are every distinct score plus one just below the minimum
    (everything called positive).
    """
    s, y = _split(scores, labels)
    uniq = np.unique(s)
    candidates = np.concatenate([[np.nextafter(uniq[0], -np.inf)], uniq])
    best_t, best_j = candidates[0], -np.inf
    for t in candidates:
        pred = s > t
        j = np.mean(pred[y]) + np.mean(~pred[~y]) - 1.0
        if j > best_j:
            best_t, best_j = t, j
    return float(best_t)


def roc_points(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) for every distinct threshold, from (0, 0) to (1, 1)."""
    s, y = _split(scores, labels)
    thresholds = np.unique(s)[::-1]
    tpr = [0.0] + [float(np.mean(s[y] >= t)) for t in thresholds]
    fpr = [0.0] + [float(np.mean(s[~y] >= t)) for t in thresholds]
    return np.array(fpr), np.array(tpr)


def high_involvement_subset(scored, cutoff: float = HIGH_INVOLVEMENT):
    """Benign cores plus cancer cores with involvement strictly above ``cutoff``."""
    return [c for c in scored if c.record.involvement == 0 or c.record.involvement > cutoff]


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    patient_fold: dict  # patient id -> fold index

    def fold_of(self, patient_id: int) -> int:
        return self.patient_fold[patient_id]

    def patients_in(self, fold: int) -> list[int]:
        return sorted(p for p, f in self.patient_fold.items() if f == fold)

    def to_dict(self) -> dict:
        return {"k": self.k, "patient_fold": {str(p): f for p, f in sorted(self.patient_fold.items())}}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldAssignment":
        return cls(int(d["k"]), {int(p): int(f) for p, f in d["patient_fold"].items()})


def kfold_split(patients, k: int, seed: int = 0) -> FoldAssignment:
    """Shuffle patients by ``seed`` and deal them round-robin into ``k`` folds."""
    patients = sorted(set(int(p) for p in patients))
    if k < 2:
        raise MetricError(f"need at least 2 folds, got {k}")
    if k > len(patients):
        raise MetricError(f"cannot split {len(patients)} patients into {k} folds")
    order = stream(seed, 0xF01D).permutation(len(patients))
    return FoldAssignment(k, {patients[j]: pos % k for pos, j in enumerate(order)})

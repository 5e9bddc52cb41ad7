"""
Evaluation metrics: accuracy, macro precision/recall/F1, macro one-vs-rest
AUROC and AUPRC, plus the mean±std report across seeds.

The ranking metrics have brute-force twins (auroc_pairwise,
average_precision_bruteforce) used as oracles in tests and verification.
"""

import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd


METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "auroc", "auprc")


class MetricError(ValueError):
    """Metric undefined for the given records."""


@dataclass
class EvalRecord:
    """True label plus the post-softmax score vector"""
    label: int
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 1:
            raise MetricError(f"Score vector must be 1-D, got shape {self.scores.shape}")
        if not 0 <= self.label < len(self.scores):
            raise MetricError(f"Label {self.label} outside [0, {len(self.scores)})")
        if np.any(self.scores < 0) or abs(self.scores.sum() - 1.0) > 1e-5:
            raise MetricError(f"Scores must be a probability vector, got {self.scores}")


def records_from_arrays(labels: Sequence[int], probabilities: np.ndarray) -> List[EvalRecord]:
    return [EvalRecord(int(y), p) for y, p in zip(labels, probabilities)]


def _stack(records: Sequence[EvalRecord]):
    if not records:
        raise MetricError("No records to evaluate")
    labels = np.array([r.label for r in records], dtype=np.int64)
    scores = np.stack([r.scores for r in records])
    return labels, scores


def confusion_metrics(records: Sequence[EvalRecord]) -> Dict[str, float]:
    """
    Accuracy and macro precision/recall/F1.

    Prediction is the argmax (lowest index on ties). Macro averages run over
    classes that occur as a label or as a prediction; 0/0 counts as 0.
    """
    labels, scores = _stack(records)
    preds = scores.argmax(axis=1)
    classes = sorted(set(labels.tolist()) | set(preds.tolist()))
    precision, recall, f1 = [], [], []
    for k in classes:
        tp = int(np.sum((preds == k) & (labels == k)))
        fp = int(np.sum((preds == k) & (labels != k)))
        fn = int(np.sum((preds != k) & (labels == k)))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        precision.append(p)
        recall.append(r)
        f1.append(2 * p * r / (p + r) if p + r else 0.0)
    return {
        "accuracy": float(np.mean(preds == labels)),
        "precision": float(np.mean(precision)),
        "recall": float(np.mean(recall)),
        "f1": float(np.mean(f1)),
    }


def auroc_binary(positive: Sequence[bool], scores: Sequence[float]) -> float:
    """Mann-Whitney AUROC from average ranks (ties get half credit)."""
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs at least one positive and one negative")
    ranks = pd.Series(np.asarray(scores, dtype=np.float64)).rank(method="average").to_numpy()
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auroc_pairwise(positive: Sequence[bool], scores: Sequence[float]) -> float:
    """O(P*N) oracle."""
    positive = np.asarray(positive, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    pos, neg = scores[positive], scores[~positive]
    if len(pos) == 0 or len(neg) == 0:
        raise MetricError("AUROC needs at least one positive and one negative")
    wins = 0.0
    for s in pos:
        for t in neg:
            wins += 1.0 if s > t else 0.5 if s == t else 0.0
    return wins / (len(pos) * len(neg))


def average_precision(positive: Sequence[bool], scores: Sequence[float]) -> float:
    """Step-integrated precision over descending thresholds; ties share one step."""
    positive = np.asarray(positive, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    total = int(positive.sum())
    if total == 0:
        raise MetricError("Average precision needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    tp = np.cumsum(positive[order])
    # last index of each group of equal scores
    ends = np.flatnonzero(np.r_[sorted_scores[1:] != sorted_scores[:-1], True])
    tp_at = tp[ends]
    precision = tp_at / (ends + 1)
    recall = tp_at / total
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def average_precision_bruteforce(positive: Sequence[bool], scores: Sequence[float]) -> float:
    """Oracle: recount TP/FP at every distinct threshold."""
    positive = np.asarray(positive, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    total = int(positive.sum())
    if total == 0:
        raise MetricError("Average precision needs at least one positive")
    ap, prev_recall = 0.0, 0.0
    for threshold in sorted(set(scores.tolist()), reverse=True):
        chosen = scores >= threshold
        tp = int(np.sum(chosen & positive))
        recall = tp / total
        ap += (recall - prev_recall) * (tp / int(chosen.sum()))
        prev_recall = recall
    return ap


def auroc_macro(records: Sequence[EvalRecord]) -> float:
    labels, scores = _stack(records)
    values = []
    for k in range(scores.shape[1]):
        positive = labels == k
        if positive.any() and (~positive).any():
            values.append(auroc_binary(positive, scores[:, k]))
    if not values:
        raise MetricError("AUROC undefined: no class has both positives and negatives")
    return float(np.mean(values))


def auprc_macro(records: Sequence[EvalRecord]) -> float:
    labels, scores = _stack(records)
    values = [average_precision(labels == k, scores[:, k])
              for k in range(scores.shape[1]) if (labels == k).any()]
    if not values:
        raise MetricError("AUPRC undefined: no class has positives")
    return float(np.mean(values))


def evaluate_records(records: Sequence[EvalRecord]) -> Dict[str, float]:
    """All six metrics; undefined ranking metrics become NaN with a warning."""
    out = confusion_metrics(records)
    for name, fn in (("auroc", auroc_macro), ("auprc", auprc_macro)):
        try:
            out[name] = fn(records)
        except MetricError as e:
            warnings.warn(f"{name}: {e}")
            out[name] = float("nan")
    return out


@dataclass
class MetricsReport:
    """Per-metric mean and population std over seeds"""
    means: Dict[str, float]
    stds: Dict[str, float]
    runs: List[Dict[str, float]] = field(default_factory=list)

    @classmethod
    def from_runs(cls, runs: Sequence[Dict[str, float]]) -> "MetricsReport":
        if not runs:
            raise MetricError("Cannot aggregate zero runs")
        frame = pd.DataFrame(list(runs), columns=list(METRIC_NAMES))
        return cls(
            means={m: float(frame[m].mean()) for m in METRIC_NAMES},
            stds={m: float(frame[m].std(ddof=0)) for m in METRIC_NAMES},
            runs=[dict(r) for r in runs],
        )

    def formatted(self, metric: str) -> str:
        """Percent with two decimals, e.g. '92.00±1.63'."""
        return f"{100 * self.means[metric]:.2f}±{100 * self.stds[metric]:.2f}"

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "mean": [self.means[m] for m in METRIC_NAMES],
                "std": [self.stds[m] for m in METRIC_NAMES],
                "formatted": [self.formatted(m) for m in METRIC_NAMES],
            },
            index=pd.Index(METRIC_NAMES, name="metric"),
        )

    def to_text(self) -> str:
        lines = [f"{'metric':<10} {'mean':>8} {'std':>8}  mean±std (%)"]
        for m in METRIC_NAMES:
            lines.append(f"{m:<10} {self.means[m]:>8.4f} {self.stds[m]:>8.4f}  {self.formatted(m)}")
        return "\n".join(lines) + "\n"

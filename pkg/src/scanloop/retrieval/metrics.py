"""Place-recognition metrics: AUC, F1max, Recall@1 and Recall@1%."""

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np


@dataclass
class RetrievalReport:
    auc: float | None = None
    f1max: float | None = None
    recall_at_1: float | None = None
    recall_at_1pct: float | None = None
    undefined: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "auc": self.auc,
            "f1max": self.f1max,
            "recall@1": self.recall_at_1,
            "recall@1%": self.recall_at_1pct,
            "undefined": list(self.undefined),
        }


def _threshold_counts(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative true/false positives when thresholding at each distinct score, high to low."""
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last_of_group = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    return tp[last_of_group].astype(np.float64), fp[last_of_group].astype(np.float64)


def roc_auc(scores: Sequence[float], labels: Sequence[bool]) -> float | None:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    tp, fp = _threshold_counts(scores, labels)
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))


def f1_max(scores: Sequence[float], labels: Sequence[bool]) -> float | None:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    if n_pos == 0 or scores.size == 0:
        return None
    tp, fp = _threshold_counts(scores, labels)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(tp > 0, 2 * precision * recall / (precision + recall), 0.0)
    return float(f1.max())


def recall_at(ranks: Sequence[Sequence[bool]], top: int | None = None, fraction: float = 0.0):
    """Share of queries with a true candidate among their first ``top`` (or ``fraction``) results.

    Queries without any true candidate are left out; None when none remain.
    """
    hits, counted = 0, 0
    for ranked in ranks:
        ranked = list(ranked)
        if not any(ranked):
            continue
        cut = top if top is not None else max(1, int(round(fraction * len(ranked))))
        counted += 1
        hits += int(any(ranked[:cut]))
    return hits / counted if counted else None


def retrieval_metrics(
    scores: Sequence[tuple[float, bool]],
    ranks: Sequence[Sequence[bool]],
) -> RetrievalReport:
    """``scores`` pairs a similarity with ground truth; ``ranks`` holds per-query truth flags
    of candidates ordered by decreasing similarity."""
    sims = [s for s, _ in scores]
    labels = [bool(t) for _, t in scores]
    report = RetrievalReport(
        auc=roc_auc(sims, labels),
        f1max=f1_max(sims, labels),
        recall_at_1=recall_at(ranks, top=1),
        recall_at_1pct=recall_at(ranks, fraction=0.01),
    )
    for name in ("auc", "f1max", "recall_at_1", "recall_at_1pct"):
        if getattr(report, name) is None:
            report.undefined.append(name)
    return report

"""Micro-F1 and coverage at a target accuracy (RP@90%)."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import ContractError


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return f1, precision, recall


def micro_f1(predictions: Sequence[set], ground_truth: Sequence[set]) -> tuple[float, float, float]:
    """Pooled (video, label) counts over all videos; returns (f1, precision, recall).

    Undefined ratios are reported as 0.
    """
    if len(predictions) != len(ground_truth):
        raise ContractError("predictions and ground truth differ in length")
    tp = fp = fn = 0
    for pred, truth in zip(predictions, ground_truth):
        pred, truth = set(pred), set(truth)
        tp += len(pred & truth)
        fp += len(pred - truth)
        fn += len(truth - pred)
    return _prf(tp, fp, fn)


def micro_f1_from_masks(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float, float]:
    pred, truth = np.asarray(pred, bool), np.asarray(truth, bool)
    tp = int((pred & truth).sum())
    return _prf(tp, int((pred & ~truth).sum()), int((~pred & truth).sum()))


def rp_at_accuracy(
    scores: Sequence[np.ndarray] | np.ndarray,
    ground_truth: Sequence[set] | np.ndarray,
    target_accuracy: float = 0.90,
) -> tuple[float, float]:
    """Largest fraction of labelled videos over thresholds keeping accuracy >= target.

    At threshold ``t`` a video is labelled when any score is ``>= t`` and
    accurate when every label scoring ``>= t`` is in its ground truth.
    Candidate thresholds are the distinct scores. Returns ``(coverage, t)``,
    or ``(0.0, inf)`` when no threshold qualifies. Ties in coverage keep the
    highest threshold.

    ``ground_truth`` holds label-index sets, or a boolean matrix shaped like
    ``scores``.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] == 0:
        raise ContractError("rp_at_accuracy needs a non-empty (videos, labels) score matrix")
    truth = _truth_matrix(ground_truth, s.shape)
    n = s.shape[0]
    top = s.max(axis=1)
    wrong = np.where(truth, -np.inf, s).max(axis=1)
    # labelled(t) = #{top >= t}; accurate(t) = #{top >= t > wrong}
    cand = np.unique(s)[::-1]
    top_sorted = np.sort(top)
    labelled = n - np.searchsorted(top_sorted, cand, side="left")
    ok = top > wrong
    acc_top = np.sort(top[ok])
    acc_wrong = np.sort(wrong[ok])
    # among ok videos: count top >= t minus count wrong >= t (wrong >= t implies top >= t)
    accurate = (len(acc_top) - np.searchsorted(acc_top, cand, side="left")) - (
        len(acc_wrong) - np.searchsorted(acc_wrong, cand, side="left")
    )
    acc = accurate / np.maximum(labelled, 1)
    qualifies = (labelled > 0) & (acc >= target_accuracy)
    if not qualifies.any():
        return 0.0, math.inf
    cover = np.where(qualifies, labelled, -1)
    best = int(np.argmax(cover))  # first max in descending-threshold order
    return float(labelled[best] / n), float(cand[best])


def _truth_matrix(ground_truth, shape) -> np.ndarray:
    gt = ground_truth
    if isinstance(gt, np.ndarray) and gt.dtype == bool:
        if gt.shape != shape:
            raise ContractError("ground-truth mask shape differs from scores")
        return gt
    if len(gt) != shape[0]:
        raise ContractError("ground truth and scores differ in length")
    m = np.zeros(shape, dtype=bool)
    for i, labels in enumerate(gt):
        m[i, list(labels)] = True
    return m


@dataclass
class MetricReport:
    f1: float
    precision: float
    recall: float
    rp90: float
    rp90_threshold: float
    level1_f1: float
    level1_precision: float
    level1_recall: float
    n_videos: int
    n_labels: int
    threshold: float | None = None
    topk: int | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = [f"{k}={_fmt(v)}" for k, v in self.to_dict().items() if k != "extra"]
        lines += [f"{k}={_fmt(v)}" for k, v in sorted(self.extra.items())]
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return "none" if v is None else str(v)

"""Temporal-only inference and evaluation reports."""

from __future__ import annotations

import json
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .data import FeatureCache, LabelHierarchy, VideoRecord
from .metrics import MetricReport, micro_f1_from_masks, rp_at_accuracy
from .model import TwoStreamModel, label_masks, make_batch
from .numerics import ConfigError


@dataclass(frozen=True)
class Selection:
    """Either keep the top ``k`` labels or every label scoring at least ``threshold``."""

    topk: int | None = None
    threshold: float | None = None

    def __post_init__(self):
        if (self.topk is None) == (self.threshold is None):
            raise ConfigError("choose exactly one of topk or threshold")
        if self.topk is not None and self.topk < 0:
            raise ConfigError("topk must be nonnegative")

    def mask(self, scores: np.ndarray) -> np.ndarray:
        if self.threshold is not None:
            return scores >= self.threshold
        out = np.zeros(scores.shape, dtype=bool)
        k = min(self.topk, scores.shape[-1])
        if k:
            # stable order: ties resolved by label index
            idx = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
            np.put_along_axis(out, idx, True, axis=-1)
        return out


@dataclass
class Prediction:
    video_id: str
    scores: dict[str, float]
    selected: list[str]

    def to_json(self) -> dict:
        return {"video_id": self.video_id, "selected": self.selected, "scores": self.scores}


def select_labels(scores: dict[str, float], selection: Selection) -> list[str]:
    names = list(scores)
    chosen = selection.mask(np.array([scores[n] for n in names]))
    return [n for n, keep in zip(names, chosen) if keep]


def temporal_score_matrix(
    model: TwoStreamModel, records: Sequence[VideoRecord], cache: FeatureCache, batch_size: int = 64
) -> tuple[np.ndarray, np.ndarray]:
    """Refined (level-1, level-2) temporal scores for every record, eval mode."""
    s1, s2 = [], []
    with nx.no_grad():
        for start in range(0, len(records), batch_size):
            batch = make_batch(records[start : start + batch_size], cache, model.hierarchy)
            sheet = model.temporal_scores(batch, train=False)
            s1.append(sheet.refined_level1.data)
            s2.append(sheet.refined_level2.data)
    return np.concatenate(s1), np.concatenate(s2)


def infer(
    model: TwoStreamModel, records: Sequence[VideoRecord], selection: Selection, cache: FeatureCache | None = None
) -> list[Prediction]:
    """Score with the temporal branch only and apply ``selection`` to refined level-2 scores."""
    h = model.hierarchy
    for rec in records:
        for _, child in rec.label_paths:
            if child not in h.parent:
                raise ConfigError(f"record {rec.video_id!r} uses label {child!r} unknown to the model")
    if not records:
        return []
    cache = cache or FeatureCache(model.store.dtype)
    _, s2 = temporal_score_matrix(model, records, cache)
    chosen = selection.mask(s2)
    return [
        Prediction(
            rec.video_id,
            {q: float(v) for q, v in zip(h.level2, row)},
            [q for q, keep in zip(h.level2, sel) if keep],
        )
        for rec, row, sel in zip(records, s2, chosen)
    ]


def evaluate(
    model: TwoStreamModel,
    records: Sequence[VideoRecord],
    selection: Selection | None = None,
    cache: FeatureCache | None = None,
    target_accuracy: float = 0.90,
) -> MetricReport:
    selection = selection or Selection(threshold=0.0)
    cache = cache or FeatureCache(model.store.dtype)
    s1, s2 = temporal_score_matrix(model, records, cache)
    pos1, pos2 = label_masks(records, model.hierarchy)
    f1, p, r = micro_f1_from_masks(selection.mask(s2), pos2)
    f1_1, p_1, r_1 = micro_f1_from_masks(selection.mask(s1), pos1)
    cover, thr = rp_at_accuracy(s2, pos2, target_accuracy)
    return MetricReport(
        f1=f1,
        precision=p,
        recall=r,
        rp90=cover,
        rp90_threshold=thr,
        level1_f1=f1_1,
        level1_precision=p_1,
        level1_recall=r_1,
        n_videos=len(records),
        n_labels=len(model.hierarchy.level2),
        threshold=selection.threshold,
        topk=selection.topk,
    )


def write_predictions(path, predictions: Sequence[Prediction]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in predictions:
            fh.write(json.dumps(p.to_json(), sort_keys=True) + "\n")


def write_report(path, report: MetricReport) -> None:
    """``metric=value`` text at ``path`` and a JSON twin at ``path + '.json'``."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    d = report.to_dict()
    d["rp90_threshold"] = None if math.isinf(d["rp90_threshold"]) else d["rp90_threshold"]
    with open(f"{path}.json", "w", encoding="utf-8") as fh:
        json.dump(d, fh, sort_keys=True, indent=2)
        fh.write("\n")


def both_stream_f1(
    model: TwoStreamModel, records: Sequence[VideoRecord], cache: FeatureCache, batch_size: int = 64
) -> tuple[float, float]:
    """Micro-F1 at threshold 0 for temporal-only scores and for the two-stream average."""
    t_scores, avg_scores = [], []
    with nx.no_grad():
        for start in range(0, len(records), batch_size):
            batch = make_batch(records[start : start + batch_size], cache, model.hierarchy)
            st = model.temporal_scores(batch).refined_level2.data
            snt = model.nontemporal_scores(batch).refined_level2.data
            t_scores.append(st)
            avg_scores.append(0.5 * (st + snt))
    _, truth = label_masks(records, model.hierarchy)
    f_t = micro_f1_from_masks(np.concatenate(t_scores) >= 0.0, truth)[0]
    f_avg = micro_f1_from_masks(np.concatenate(avg_scores) >= 0.0, truth)[0]
    return f_t, f_avg


def describe_hierarchy(h: LabelHierarchy) -> str:
    return f"{len(h.level1)} level-1 / {len(h.level2)} level-2 labels"

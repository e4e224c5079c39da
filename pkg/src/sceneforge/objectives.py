"""Losses: multi-label cross entropy, per-stream objective, distillation, total."""

from __future__ import annotations

from collections.abc import Iterable

import numpy as np

from . import numerics as nx
from .config import LossWeights
from .numerics import DimensionError, Tensor
from .temporal import ScoreSheet


def positives_mask(positives: Iterable[int], n_labels: int) -> np.ndarray:
    mask = np.zeros(n_labels, dtype=bool)
    idx = list(positives)
    if any(not 0 <= i < n_labels for i in idx):
        raise IndexError(f"positive index outside 0..{n_labels - 1}")
    mask[idx] = True
    return mask


def multilabel_ce(scores, positives) -> Tensor:
    """``log(1 + sum_neg e^s) + log(1 + sum_pos e^-s)``, averaged over the batch.

    ``positives`` is a boolean mask shaped like ``scores`` or, for a single
    score vector, an iterable of positive indices.
    """
    scores = nx.as_tensor(scores)
    mask = np.asarray(positives)
    if mask.dtype != bool:
        mask = positives_mask(positives, scores.shape[-1])
    if mask.shape != scores.shape:
        raise DimensionError(f"mask {mask.shape} vs scores {scores.dims}")
    per_video = nx.add(nx.log1p_sum_exp(scores, ~mask), nx.log1p_sum_exp(nx.scale(scores, -1.0), mask))
    return nx.mean(per_video)


def stream_loss(sheet: ScoreSheet, positives1: np.ndarray, positives2: np.ndarray, weights: LossWeights) -> Tensor:
    j1 = multilabel_ce(sheet.refined_level1, positives1)
    j2 = multilabel_ce(sheet.refined_level2, positives2)
    return nx.add(nx.scale(j1, weights.beta_level_1), nx.scale(j2, weights.beta_level_2))


def level_distance(a: Tensor, b: Tensor) -> Tensor:
    """Per-video Euclidean distance along the label axis, averaged over videos."""
    diff = nx.sub(a, b)
    return nx.mean(nx.sqrt(nx.sum(nx.mul(diff, diff), axis=-1)))


def distill_loss(temporal: ScoreSheet, nontemporal: ScoreSheet, weights: LossWeights) -> Tensor:
    """Weighted per-level distances between refined scores; gradients reach both sheets."""
    if temporal.refined_level2.shape != nontemporal.refined_level2.shape:
        raise DimensionError("score sheets cover different label sets")
    j1 = level_distance(temporal.refined_level1, nontemporal.refined_level1)
    j2 = level_distance(temporal.refined_level2, nontemporal.refined_level2)
    return nx.add(nx.scale(j1, weights.beta_level_1), nx.scale(j2, weights.beta_level_2))


def total_objective(j_t, j_nt, j_distill, weights: LossWeights) -> Tensor:
    return nx.add(
        nx.add(nx.scale(nx.as_tensor(j_t), weights.beta_t), nx.scale(nx.as_tensor(j_nt), weights.beta_nt)),
        nx.scale(nx.as_tensor(j_distill), weights.beta_distill),
    )

"""Temporal branch: frame-level global features, CLS encoder, hierarchical head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .blocks import RefineBlockParams, TransformerParams, refine_block, transformer_encode
from .data import LabelHierarchy, VideoRecord, load_features
from .numerics import ConfigError, DimensionError, ParameterStore, Tensor


@dataclass
class ScoreSheet:
    """Basic and refined scores for both hierarchy levels.

    All four tensors share leading (batch) dims; the last axis indexes labels.
    """

    basic_level1: Tensor
    basic_level2: Tensor
    refined_level1: Tensor
    refined_level2: Tensor


def refine_scores(basic1: Tensor, basic2: Tensor, hierarchy: LabelHierarchy) -> ScoreSheet:
    """Level-1 refined = basic; level-2 refined = own basic + parent's basic."""
    if basic1.shape[-1] != len(hierarchy.level1) or basic2.shape[-1] != len(hierarchy.level2):
        raise ConfigError(
            f"score widths {basic1.shape[-1]}/{basic2.shape[-1]} do not fit hierarchy "
            f"{len(hierarchy.level1)}/{len(hierarchy.level2)}"
        )
    parents = nx.take(basic1, hierarchy.parent_index, axis=-1)
    return ScoreSheet(basic1, basic2, basic1, nx.add(parents, basic2))


@dataclass
class LevelHead:
    w4: Tensor
    b4: Tensor
    w5: Tensor
    b5: Tensor

    @classmethod
    def create(cls, store: ParameterStore, prefix: str, d_emb: int, n_labels: int):
        return cls(
            w4=store.gaussian_init(f"{prefix}.w4", (d_emb, d_emb)),
            b4=store.gaussian_init(f"{prefix}.b4", (d_emb,), bias=True),
            w5=store.gaussian_init(f"{prefix}.w5", (n_labels, d_emb)),
            b5=store.gaussian_init(f"{prefix}.b5", (n_labels,), bias=True),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return nx.linear(nx.gelu(nx.linear(x, self.w4, self.b4)), self.w5, self.b5)


@dataclass
class TemporalHeadParams:
    level1: LevelHead
    level2: LevelHead

    @classmethod
    def create(cls, store: ParameterStore, prefix: str, d_emb: int, hierarchy: LabelHierarchy):
        return cls(
            LevelHead.create(store, f"{prefix}.level1", d_emb, len(hierarchy.level1)),
            LevelHead.create(store, f"{prefix}.level2", d_emb, len(hierarchy.level2)),
        )


def concat_frame_inputs(frame_2d, clip_3d, text) -> Tensor:
    """Per frame ``2D ⊕ 3D ⊕ text``; the video-level text vector repeats on every frame.

    Accepts (N, d) / (N, d) / (dt,) for one video or (B, N, d) / (B, N, d) / (B, dt).
    """
    f2, f3, tx = nx.as_tensor(frame_2d), nx.as_tensor(clip_3d), nx.as_tensor(text)
    if f2.shape[:-1] != f3.shape[:-1]:
        raise DimensionError(f"2D features {f2.dims} and 3D features {f3.dims} disagree on frames")
    if tx.shape[:-1] != f2.shape[:-2]:
        raise DimensionError(f"text feature {tx.dims} does not match frame batch {f2.dims}")
    tx = nx.broadcast_to(nx.reshape(tx, (*tx.shape[:-1], 1, tx.shape[-1])), (*f2.shape[:-1], tx.shape[-1]))
    return nx.concat([f2, f3, tx], axis=-1)


def build_frame_global_features(
    frame_2d,
    clip_3d,
    text,
    refine: RefineBlockParams,
    train: bool = False,
    keep_prob: float = 0.5,
    rng: np.random.Generator | None = None,
) -> Tensor:
    x = concat_frame_inputs(frame_2d, clip_3d, text)
    if x.shape[-1] != refine.in_dim:
        raise DimensionError(f"concatenated width {x.shape[-1]} != refine input {refine.in_dim}")
    return refine_block(x, refine, train, keep_prob, rng)


def record_frame_features(
    features,
    refine: RefineBlockParams,
    train: bool = False,
    keep_prob: float = 0.5,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """(N_f, d_emb) frame features for one video given its record or loaded features."""
    if isinstance(features, VideoRecord):
        features = load_features(features, refine.w1.dtype)
    return build_frame_global_features(features.frame_2d, features.clip_3d, features.text, refine, train, keep_prob, rng)


def temporal_encode(frame_globals: Tensor, cls_token: Tensor, params: TransformerParams) -> Tensor:
    """Prepend CLS, add positions, encode, and return the CLS-slot output."""
    *lead, n_frames, width = frame_globals.shape
    cls = nx.broadcast_to(nx.reshape(cls_token, (1,) * len(lead) + (1, width)), (*lead, 1, width))
    seq = nx.concat([cls, frame_globals], axis=-2)
    out = transformer_encode(seq, params, use_positions=True)
    return nx.reshape(nx.take(out, [0], axis=-2), (*lead, width))


def hierarchical_score_head(video_feature: Tensor, head: TemporalHeadParams, hierarchy: LabelHierarchy) -> ScoreSheet:
    if head.level1.w5.shape[0] != len(hierarchy.level1) or head.level2.w5.shape[0] != len(hierarchy.level2):
        raise ConfigError("head output sizes do not match the hierarchy")
    if video_feature.shape[-1] != head.level1.w4.shape[1]:
        raise DimensionError(f"video feature width {video_feature.shape[-1]} != head width {head.level1.w4.shape[1]}")
    return refine_scores(head.level1(video_feature), head.level2(video_feature), hierarchy)

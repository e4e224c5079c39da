"""Knowledge-enhanced non-temporal branch.

Nothing in this branch sees frame order: regions are encoded without
positions, frames are pooled by keyword-conditioned soft assignment and by a
plain mean.
"""

from __future__ import annotations

from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .blocks import AttentionParams, RefineBlockParams, TransformerParams, self_attention, transformer_encode
from .data import KnowledgeStore, LabelHierarchy
from .numerics import DimensionError, ParameterStore, Tensor
from .temporal import ScoreSheet, build_frame_global_features, refine_scores

# every public op bumps its entry; inference asserts these stay untouched
op_counter: Counter = Counter()


@dataclass
class TwoLayer:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def create(cls, store: ParameterStore, prefix: str, in_dim: int, hidden: int, out_dim: int):
        return cls(
            w1=store.gaussian_init(f"{prefix}.w1", (hidden, in_dim)),
            b1=store.gaussian_init(f"{prefix}.b1", (hidden,), bias=True),
            w2=store.gaussian_init(f"{prefix}.w2", (out_dim, hidden)),
            b2=store.gaussian_init(f"{prefix}.b2", (out_dim,), bias=True),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return nx.linear(nx.gelu(nx.linear(x, self.w1, self.b1)), self.w2, self.b2)


@dataclass
class GeneratorParams:
    """Shared generators for per-keyword cluster weight, bias and center."""

    phi_w: TwoLayer
    phi_c: TwoLayer
    phi_z: TwoLayer

    @classmethod
    def create(cls, store: ParameterStore, prefix: str, d_kg: int, hidden: int, d_emb: int):
        return cls(
            TwoLayer.create(store, f"{prefix}.w", d_kg, hidden, d_emb),
            TwoLayer.create(store, f"{prefix}.c", d_kg, hidden, 1),
            TwoLayer.create(store, f"{prefix}.z", d_kg, hidden, d_emb),
        )


@dataclass
class MatchingNetParams:
    video1: TwoLayer
    label1: TwoLayer
    video2: TwoLayer
    label2: TwoLayer

    @classmethod
    def create(cls, store: ParameterStore, prefix: str, d_emb: int, d_kg: int, d_match: int):
        return cls(
            TwoLayer.create(store, f"{prefix}.level1.video", d_emb, d_emb, d_match),
            TwoLayer.create(store, f"{prefix}.level1.label", d_kg, d_emb, d_match),
            TwoLayer.create(store, f"{prefix}.level2.video", d_emb, d_emb, d_match),
            TwoLayer.create(store, f"{prefix}.level2.label", d_kg, d_emb, d_match),
        )


@dataclass
class RegionEncoderParams:
    adapt_w: Tensor
    adapt_b: Tensor
    encoder: TransformerParams

    @classmethod
    def create(cls, store, prefix, d_region, d_emb, n_layers, n_heads, ffn_dim):
        return cls(
            store.gaussian_init(f"{prefix}.adapt_w", (d_emb, d_region)),
            store.gaussian_init(f"{prefix}.adapt_b", (d_emb,), bias=True),
            TransformerParams.create(store, f"{prefix}.enc", d_emb, n_layers, n_heads, ffn_dim),
        )


def build_frame_local_features(
    frame_2d,
    clip_3d,
    text,
    refine: RefineBlockParams,
    train: bool = False,
    keep_prob: float = 0.5,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Same refine pipeline as the temporal branch, run with the local-frame parameters."""
    op_counter["build_frame_local_features"] += 1
    return build_frame_global_features(frame_2d, clip_3d, text, refine, train, keep_prob, rng)


def region_encode(frame_regions, params: RegionEncoderParams) -> Tensor:
    """Width-adapt then encode regions of one frame (..., M, d_region), no positions."""
    op_counter["region_encode"] += 1
    x = nx.linear(nx.as_tensor(frame_regions), params.adapt_w, params.adapt_b)
    return transformer_encode(x, params.encoder, use_positions=False)


def frame_local_fusion(
    local_feature: Tensor, encoded_regions: Tensor | None, params: AttentionParams
) -> tuple[Tensor, Tensor | None]:
    """Attend from a frame's local feature over its encoded regions.

    ``local_feature`` is (..., d) and ``encoded_regions`` (..., M, d). Returns
    the fused feature and the attention row(s) (..., M). A frame with no regions
    passes through unchanged with ``None`` weights.
    """
    op_counter["frame_local_fusion"] += 1
    if encoded_regions is None or encoded_regions.shape[-2] == 0:
        return local_feature, None
    if local_feature.shape[:-1] != encoded_regions.shape[:-2]:
        raise DimensionError(f"local {local_feature.dims} vs regions {encoded_regions.dims}")
    q = nx.reshape(local_feature, (*local_feature.shape[:-1], 1, local_feature.shape[-1]))
    out, weights = self_attention(q, encoded_regions, params, n_heads=1)
    lead = local_feature.shape[:-1]
    return nx.reshape(out, (*lead, out.shape[-1])), nx.reshape(weights, (*lead, weights.shape[-1]))


def fuse_frames(
    local_frames: Tensor,
    regions: np.ndarray,
    region_counts: np.ndarray,
    region_params: RegionEncoderParams,
    attn: AttentionParams,
) -> Tensor:
    """Region reasoning + local fusion for a (B, N, d) batch of frames.

    Frames are grouped by their valid region count so every encoder call sees
    a dense (n, c, d_region) block without masking.
    """
    b, n, d = local_frames.shape
    flat = nx.reshape(local_frames, (b * n, d))
    regions = regions.reshape(b * n, *regions.shape[-2:])
    counts = np.asarray(region_counts).reshape(b * n)
    pieces, order = [], []
    for c in sorted(set(counts.tolist())):
        idx = np.flatnonzero(counts == c)
        local = nx.take(flat, idx, axis=0)
        if c == 0:
            fused = local
        else:
            encoded = region_encode(regions[idx, :c], region_params)
            fused, _ = frame_local_fusion(local, encoded, attn)
        pieces.append(fused)
        order.append(idx)
    order = np.concatenate(order)
    if len(pieces) == 1 and np.array_equal(order, np.arange(b * n)):
        joined = pieces[0]
    else:
        joined = nx.take(nx.concat(pieces, axis=0), np.argsort(order, kind="stable"), axis=0)
    return nx.reshape(joined, (b, n, joined.shape[-1]))


def generate_cluster_params(kg_vec, gen: GeneratorParams) -> tuple[Tensor, Tensor, Tensor]:
    """Per-keyword (weight, bias, center) from entity embeddings (..., d_kg)."""
    op_counter["generate_cluster_params"] += 1
    kg = nx.as_tensor(kg_vec)
    c = gen.phi_c(kg)
    return gen.phi_w(kg), nx.reshape(c, c.shape[:-1]), gen.phi_z(kg)


def keyword_cluster_fusion(fused_frames: Tensor, kg_vec, gen: GeneratorParams) -> tuple[Tensor, Tensor]:
    """Soft-assign frames to a keyword cluster and sum residuals to its center.

    ``fused_frames`` is (..., N, d) and ``kg_vec`` (..., d_kg) with matching
    leading dims. The assignment softmax runs over the N frames. Returns the
    keyword feature (..., d) and the assignment weights (..., N).
    """
    op_counter["keyword_cluster_fusion"] += 1
    w, c, z = generate_cluster_params(kg_vec, gen)
    lead = fused_frames.shape[:-2]
    d = fused_frames.shape[-1]
    w_col = nx.reshape(w, (*lead, d, 1))
    logits = nx.add(nx.reshape(nx.matmul(fused_frames, w_col), fused_frames.shape[:-1]), nx.reshape(c, (*lead, 1)))
    alpha = nx.softmax(logits, axis=-1)
    resid = nx.sub(fused_frames, nx.reshape(z, (*lead, 1, d)))
    feat = nx.matmul(nx.reshape(alpha, (*lead, 1, alpha.shape[-1])), resid)
    return nx.reshape(feat, (*lead, d)), alpha


def video_nontemporal_feature(
    fused_frames: Tensor,
    keyword_features: Sequence[Tensor] | Tensor | None,
    proj_w: Tensor,
    proj_b: Tensor,
    owners: np.ndarray | None = None,
) -> Tensor:
    """Keyword mean + frame mean, then a linear projection.

    For one video pass ``fused_frames`` (N, d) and a list of (d,) keyword
    features. For a batch pass (B, N, d), a stacked (K, d) keyword tensor and
    ``owners`` giving each keyword's video index. Videos without keywords use
    the frame mean alone.
    """
    op_counter["video_nontemporal_feature"] += 1
    pooled = nx.mean(fused_frames, axis=-2)
    if owners is None:
        kws = list(keyword_features or [])
        if kws:
            pooled = nx.add(pooled, nx.mean(nx.stack(kws, axis=0), axis=0))
    elif keyword_features is not None and len(owners):
        b = fused_frames.shape[0]
        avg = np.zeros((b, len(owners)), dtype=fused_frames.dtype)
        counts = np.bincount(owners, minlength=b)
        avg[owners, np.arange(len(owners))] = 1.0 / counts[owners]
        pooled = nx.add(pooled, nx.matmul(nx.Tensor(avg), keyword_features))
    return nx.linear(pooled, proj_w, proj_b)


def label_embeddings(labels: Sequence[str], hierarchy: LabelHierarchy, kstore: KnowledgeStore) -> Tensor:
    return nx.stack([kstore.lookup(hierarchy.token(q), role="label") for q in labels], axis=0)


def label_matching_scores(
    e_nt: Tensor, hierarchy: LabelHierarchy, kstore: KnowledgeStore, nets: MatchingNetParams
) -> ScoreSheet:
    """Inner products between transformed video and label vectors, then refinement."""
    op_counter["label_matching_scores"] += 1
    basics = []
    for labels, video_net, label_net in (
        (hierarchy.level1, nets.video1, nets.label1),
        (hierarchy.level2, nets.video2, nets.label2),
    ):
        v = video_net(e_nt)
        lab = label_net(label_embeddings(labels, hierarchy, kstore))
        basics.append(nx.matmul(v, nx.transpose(lab, (1, 0))))
    return refine_scores(basics[0], basics[1], hierarchy)

"""The two-stream model: parameters, batching and the per-stream forward passes."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .blocks import AttentionParams, RefineBlockParams, TransformerParams
from .config import ModelConfig
from .data import FeatureCache, KnowledgeStore, LabelHierarchy, VideoFeatures, VideoRecord
from .nontemporal import (
    GeneratorParams,
    build_frame_local_features,
    MatchingNetParams,
    RegionEncoderParams,
    fuse_frames,
    keyword_cluster_fusion,
    label_matching_scores,
    video_nontemporal_feature,
)
from .numerics import ConfigError, ParameterStore, Tensor
from .temporal import (
    ScoreSheet,
    TemporalHeadParams,
    build_frame_global_features,
    hierarchical_score_head,
    temporal_encode,
)


@dataclass
class Batch:
    video_ids: list[str]
    frame_2d: np.ndarray  # (B, N, d2d)
    clip_3d: np.ndarray  # (B, N, d3d)
    text: np.ndarray  # (B, dtext)
    regions: np.ndarray  # (B, N, M, dregion)
    region_counts: np.ndarray  # (B, N)
    keywords: list[list[str]]
    positives1: np.ndarray  # (B, |L1|) bool
    positives2: np.ndarray  # (B, |L2|) bool

    def __len__(self) -> int:
        return len(self.video_ids)


def label_masks(records: Sequence[VideoRecord], hierarchy: LabelHierarchy) -> tuple[np.ndarray, np.ndarray]:
    """Level-1 / level-2 positive masks from label paths; unknown labels are ignored."""
    pos1 = np.zeros((len(records), len(hierarchy.level1)), dtype=bool)
    pos2 = np.zeros((len(records), len(hierarchy.level2)), dtype=bool)
    for i, rec in enumerate(records):
        for p1, p2 in rec.label_paths:
            if p1 in hierarchy.level1:
                pos1[i, hierarchy.index1(p1)] = True
            if p2 in hierarchy.level2:
                pos2[i, hierarchy.index2(p2)] = True
    return pos1, pos2


def make_batch(
    records: Sequence[VideoRecord], features: FeatureCache | Sequence[VideoFeatures], hierarchy: LabelHierarchy
) -> Batch:
    feats = [features.get(r) for r in records] if isinstance(features, FeatureCache) else list(features)
    pos1, pos2 = label_masks(records, hierarchy)
    return Batch(
        video_ids=[r.video_id for r in records],
        frame_2d=np.stack([f.frame_2d for f in feats]),
        clip_3d=np.stack([f.clip_3d for f in feats]),
        text=np.stack([f.text for f in feats]),
        regions=np.stack([f.regions for f in feats]),
        region_counts=np.stack([f.region_counts for f in feats]),
        keywords=[list(r.keywords) for r in records],
        positives1=pos1,
        positives2=pos2,
    )


class TwoStreamModel:
    """Parameter layout and forward passes for both streams."""

    def __init__(
        self,
        config: ModelConfig,
        hierarchy: LabelHierarchy,
        kstore: KnowledgeStore,
        store: ParameterStore | None = None,
        seed: int = 0,
        dtype=np.float64,
    ):
        cfg = config.resolved()
        cfg.validate()
        if kstore.d_kg != cfg.d_kg:
            raise ConfigError(f"knowledge store width {kstore.d_kg} != config d_kg {cfg.d_kg}")
        self.config = cfg
        self.hierarchy = hierarchy
        self.kstore = kstore
        fresh = store is None
        self.store = store if store is not None else ParameterStore(seed, dtype=dtype, init_std=cfg.init_std)
        self.kstore.bind(self.store)
        if fresh:
            self._build(self.store)
        self._bind(self.store)

    # registration happens once, in a fixed order, so equal seeds give equal params
    def _build(self, s: ParameterStore) -> None:
        c = self.config
        concat = c.d2d + c.d3d + c.dtext
        RefineBlockParams.create(s, "gframe", concat, c.refine_hidden, c.d_emb)
        s.gaussian_init("temporal.cls", (c.d_emb,))
        TransformerParams.create(s, "temporal.enc", c.d_emb, c.n_layers, c.n_heads, c.ffn_dim, max_len=c.n_frames + 1)
        TemporalHeadParams.create(s, "temporal.head", c.d_emb, self.hierarchy)
        RefineBlockParams.create(s, "lframe", concat, c.refine_hidden, c.d_emb)
        RegionEncoderParams.create(s, "region", c.dregion, c.d_emb, c.region_layers, c.region_heads, c.ffn_dim)
        AttentionParams.create(s, "local_attn", c.d_emb, c.d_emb, c.d_emb, with_bias=False)
        GeneratorParams.create(s, "gen", c.d_kg, c.gen_hidden, c.d_emb)
        s.gaussian_init("nt.proj_w", (c.d_emb, c.d_emb))
        s.gaussian_init("nt.proj_b", (c.d_emb,), bias=True)
        MatchingNetParams.create(s, "match", c.d_emb, c.d_kg, c.match_dim)
        for q in [*self.hierarchy.level1, *self.hierarchy.level2]:
            self.kstore.lookup(self.hierarchy.token(q), role="label")

    def _bind(self, s: ParameterStore) -> None:
        """Wrap already-registered tensors in the parameter dataclasses."""
        c = self.config
        view = _View(s)
        self.gframe = view.load(RefineBlockParams, "gframe", c.d2d + c.d3d + c.dtext, c.refine_hidden, c.d_emb)
        self.cls_token = s["temporal.cls"]
        self.temporal_encoder = view.load(
            TransformerParams, "temporal.enc", c.d_emb, c.n_layers, c.n_heads, c.ffn_dim, max_len=c.n_frames + 1
        )
        self.temporal_head = view.load(TemporalHeadParams, "temporal.head", c.d_emb, self.hierarchy)
        self.lframe = view.load(RefineBlockParams, "lframe", c.d2d + c.d3d + c.dtext, c.refine_hidden, c.d_emb)
        self.region = view.load(
            RegionEncoderParams, "region", c.dregion, c.d_emb, c.region_layers, c.region_heads, c.ffn_dim
        )
        self.local_attn = view.load(AttentionParams, "local_attn", c.d_emb, c.d_emb, c.d_emb, with_bias=False)
        self.gen = view.load(GeneratorParams, "gen", c.d_kg, c.gen_hidden, c.d_emb)
        self.nt_proj_w, self.nt_proj_b = s["nt.proj_w"], s["nt.proj_b"]
        self.match = view.load(MatchingNetParams, "match", c.d_emb, c.d_kg, c.match_dim)

    def temporal_names(self) -> list[str]:
        return [n for n in self.store.names() if n.startswith(("gframe.", "temporal."))]

    def nontemporal_names(self) -> list[str]:
        return [n for n in self.store.names() if n not in set(self.temporal_names())]

    # -- forward passes -----------------------------------------------------

    def temporal_feature(self, batch: Batch, train: bool = False) -> Tensor:
        c = self.config
        frames = build_frame_global_features(
            batch.frame_2d, batch.clip_3d, batch.text, self.gframe, train, c.keep_prob, self.store.rng
        )
        return temporal_encode(frames, self.cls_token, self.temporal_encoder)

    def temporal_scores(self, batch: Batch, train: bool = False) -> ScoreSheet:
        return hierarchical_score_head(self.temporal_feature(batch, train), self.temporal_head, self.hierarchy)

    def nontemporal_feature(self, batch: Batch, train: bool = False) -> Tensor:
        c = self.config
        local = build_frame_local_features(
            batch.frame_2d, batch.clip_3d, batch.text, self.lframe, train, c.keep_prob, self.store.rng
        )
        fused = fuse_frames(local, batch.regions, batch.region_counts, self.region, self.local_attn)
        owners, vecs = [], []
        for i, words in enumerate(batch.keywords):
            for w in words:
                vec = self.kstore.lookup(w, role="keyword")
                if vec is not None:
                    owners.append(i)
                    vecs.append(vec)
        kw_feats = None
        owners_arr = np.asarray(owners, dtype=np.intp)
        if vecs:
            kg = nx.stack(vecs, axis=0)
            frames_per_kw = nx.take(fused, owners_arr, axis=0)
            kw_feats, _ = keyword_cluster_fusion(frames_per_kw, kg, self.gen)
        return video_nontemporal_feature(fused, kw_feats, self.nt_proj_w, self.nt_proj_b, owners=owners_arr)

    def nontemporal_scores(self, batch: Batch, train: bool = False) -> ScoreSheet:
        e_nt = self.nontemporal_feature(batch, train)
        return label_matching_scores(e_nt, self.hierarchy, self.kstore, self.match)


class _View:
    """Re-create parameter dataclasses over an existing store without new draws."""

    def __init__(self, store: ParameterStore):
        self.store = store

    def load(self, cls, prefix, *args, **kwargs):
        shadow = _LookupStore(self.store)
        return cls.create(shadow, prefix, *args, **kwargs)


class _LookupStore:
    def __init__(self, store: ParameterStore):
        self._store = store

    def gaussian_init(self, name, dims, bias=False):
        t = self._store[name]
        if tuple(t.shape) != tuple(dims):
            raise ConfigError(f"parameter {name} has dims {t.dims}, expected {list(dims)}")
        return t

    def register(self, name, values):
        return self.gaussian_init(name, np.shape(values))

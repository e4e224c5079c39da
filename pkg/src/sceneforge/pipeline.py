"""Glue shared by the CLI, the experiment scripts and the acceptance suite."""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import read_checkpoint, save_checkpoint
from .config import RunConfig
from . import numerics as nx
from .data import (
    DatasetSplit,
    FeatureCache,
    KnowledgeStore,
    LabelHierarchy,
    ManifestHeader,
    VideoRecord,
    load_knowledge,
    read_manifest,
    split_records,
)
from .model import TwoStreamModel, make_batch
from .nontemporal import label_matching_scores
from .numerics import finite_diff_check
from .training import TrainReport, TrainState, forward_losses, train


@dataclass
class Corpus:
    header: ManifestHeader
    records: list[VideoRecord]
    kstore: KnowledgeStore
    path: Path

    @property
    def split(self) -> DatasetSplit:
        return split_records(self.records)


def open_corpus(manifest: str | os.PathLike, d_kg: int | None = None) -> Corpus:
    header, records = read_manifest(manifest)
    kstore = load_knowledge(header, manifest)
    if kstore is None:
        kstore = KnowledgeStore({}, d_kg=d_kg or 300)
    return Corpus(header, records, kstore, Path(manifest))


def fill_dims(cfg: RunConfig, corpus: Corpus) -> RunConfig:
    """Copy feature widths from the manifest header into the model config."""
    d = corpus.header.dims
    m = cfg.model
    m.d2d, m.d3d, m.dtext, m.dregion = d["d2d"], d["d3d"], d["dtext"], d["dregion"]
    m.n_frames = d["n_frames"]
    m.d_kg = corpus.kstore.d_kg
    return cfg


def dtype_of(cfg: RunConfig):
    return np.dtype(cfg.train.precision)


def build_model(cfg: RunConfig, corpus: Corpus, store=None) -> TwoStreamModel:
    fill_dims(cfg, corpus)
    return TwoStreamModel(cfg.model, corpus.header.hierarchy, corpus.kstore, store=store, seed=cfg.train.seed, dtype=dtype_of(cfg))


def train_corpus(
    cfg: RunConfig, corpus: Corpus, checkpoint: str | os.PathLike | None = None, on_epoch=None
) -> tuple[TwoStreamModel, TrainReport, TrainState]:
    model = build_model(cfg, corpus)
    state = TrainState.fresh(model.store, cfg.train.seed, cfg.train.patience)
    cache = FeatureCache(model.store.dtype)
    report = train(cfg, corpus.split, model, state, cache, on_epoch=on_epoch)
    if checkpoint is not None:
        save_checkpoint(model.store, state, checkpoint, cfg)
    return model, report, state


def load_model(checkpoint: str | os.PathLike, corpus: Corpus) -> TwoStreamModel:
    ck = read_checkpoint(checkpoint)
    return build_model(ck.config, corpus, store=ck.store)


# parameters whose gradient is identically zero by construction: the generated
# per-keyword cluster bias is constant across frames, and the frame softmax
# cancels any such constant
INERT_PREFIXES = ("gen.c.",)


@dataclass
class GradcheckResult:
    max_error: float
    inert_max_grad: float
    n_checked: int
    n_inert: int


def gradcheck_model(cfg: RunConfig, corpus: Corpus, samples_per_param: int = 3, seed: int = 0) -> GradcheckResult:
    """Full two-stream objective on a 2-video micro-batch, dropout off, 64-bit."""
    cfg.train.precision = "float64"
    model = build_model(cfg, corpus)
    videos = corpus.split.train[:2] or corpus.records[:2]
    batch = make_batch(videos, FeatureCache(np.float64), corpus.header.hierarchy)

    def loss_fn(_store):
        return forward_losses(model, batch, cfg.weights, train=False)[0]

    names = model.store.names()
    active = [n for n in names if not n.startswith(INERT_PREFIXES)]
    inert = [n for n in names if n.startswith(INERT_PREFIXES)]
    err = finite_diff_check(loss_fn, model.store, samples_per_param=samples_per_param, seed=seed, names=active)
    inert_grad = max((float(np.abs(model.store[n].grad).max()) for n in inert), default=0.0)
    return GradcheckResult(err, inert_grad, len(active), len(inert))


def tiny_corpus(seed: int = 0, directory: str | os.PathLike | None = None) -> Corpus:
    """A few synthetic videos for smoke runs and gradient checks."""
    from .synthetic import SyntheticSpec, generate_synthetic_dataset

    out = Path(directory) if directory is not None else Path(tempfile.mkdtemp(prefix="sceneforge_"))
    spec = SyntheticSpec(n_videos=12, n_parents=2, children_per_parent=2, n_frames=4, regions=3, seed=seed, n_heldout_videos=0)
    generate_synthetic_dataset(spec, out)
    return open_corpus(out / "manifest.jsonl")


def register_label(model: TwoStreamModel, name: str, parent: str, token: str, vector) -> LabelHierarchy:
    """Add a level-2 label known only through its entity embedding; no parameter changes."""
    model.kstore.add(token, vector)
    return model.hierarchy.with_child(name, parent, token)


def nontemporal_label_ranks(
    model: TwoStreamModel, hierarchy: LabelHierarchy, records: list[VideoRecord], label: str, cache: FeatureCache | None = None
) -> np.ndarray:
    """1-based rank of ``label`` among refined level-2 non-temporal scores, per record."""
    cache = cache or FeatureCache(model.store.dtype)
    col = hierarchy.index2(label)
    ranks = []
    with nx.no_grad():
        for start in range(0, len(records), 64):
            batch = make_batch(records[start : start + 64], cache, model.hierarchy)
            e_nt = model.nontemporal_feature(batch)
            s = label_matching_scores(e_nt, hierarchy, model.kstore, model.match).refined_level2.data
            ranks.append(1 + (s > s[:, col : col + 1]).sum(axis=1))
    return np.concatenate(ranks)

"""Planted-structure corpus generator and its nearest-centroid oracle.

Every level-2 label owns a center in entity-embedding space; children sit
near their parent. A video's frames are split into contiguous segments, one
per label it carries, and every feature is a fixed random projection of that
segment's (noisy) center plus observation noise. Keyword and label entity
embeddings are the centers plus noise, so labels are recoverable from the
features by construction.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import (
    FeatureCache,
    KnowledgeStore,
    LabelHierarchy,
    ManifestHeader,
    VideoRecord,
    validate_hierarchy,
    write_manifest,
)
from .metrics import micro_f1
from .tensorio import save_tensor_file


class SyntheticSpecError(ValueError):
    pass


@dataclass
class SyntheticSpec:
    n_videos: int = 600
    n_parents: int = 3
    children_per_parent: int = 4
    n_frames: int = 12
    regions: int = 4
    d2d: int = 32
    d3d: int = 24
    dtext: int = 16
    dregion: int = 24
    d_kg: int = 32
    noise: float = 0.5
    seed: int = 0
    child_spread: float = 0.8
    vocab_per_label: int = 3
    max_keywords: int = 10
    oov_rate: float = 0.2
    partial_region_rate: float = 0.1
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    n_heldout_videos: int = 40
    unmatched_label: bool = True

    def validate(self) -> None:
        if self.n_videos <= 0:
            raise SyntheticSpecError("n_videos must be positive")
        if self.n_parents <= 0 or self.children_per_parent <= 0:
            raise SyntheticSpecError("hierarchy needs at least one parent and one child")
        if self.n_frames < 2:
            raise SyntheticSpecError("need at least two frames per video")
        if min(self.regions, self.d2d, self.d3d, self.dtext, self.dregion, self.d_kg) <= 0:
            raise SyntheticSpecError("feature dims must be positive")
        if self.noise < 0:
            raise SyntheticSpecError("noise must be nonnegative")


@dataclass
class SyntheticTruth:
    """Generator description sufficient to run the centroid oracle."""

    spec: SyntheticSpec
    level2: list[str]
    parent_of: dict[str, str]
    centers: dict[str, list[float]]
    parent_centers: dict[str, list[float]]
    proj_2d: list[list[float]]
    proj_3d: list[list[float]]
    heldout: dict | None

    def to_json(self) -> dict:
        d = asdict(self)
        d["spec"] = asdict(self.spec)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> SyntheticTruth:
        obj = dict(obj)
        obj["spec"] = SyntheticSpec(**obj["spec"])
        return cls(**obj)

    @classmethod
    def load(cls, path: str | os.PathLike) -> SyntheticTruth:
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def _segments(n_frames: int, k: int, rng: np.random.Generator) -> list[int]:
    """Frame -> label slot, contiguous runs, every slot used."""
    sizes = [n_frames // k + (1 if i < n_frames % k else 0) for i in range(k)]
    order = rng.permutation(k)
    out: list[int] = []
    for slot in order:
        out.extend([int(slot)] * sizes[slot])
    return out


def generate_synthetic_dataset(spec: SyntheticSpec, out_dir: str | os.PathLike) -> SyntheticTruth:
    """Write ``manifest.jsonl``, ``heldout.jsonl``, ``kg.txt``, ``truth.json`` and feature files."""
    spec.validate()
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    d = spec.d_kg

    parents = [f"P{i}" for i in range(spec.n_parents)]
    children = [f"P{i}_c{j}" for i in range(spec.n_parents) for j in range(spec.children_per_parent)]
    parent_of = {c: c.split("_")[0] for c in children}
    heldout_name = "P0_new" if spec.n_heldout_videos > 0 else None

    parent_centers = {p: rng.normal(0.0, 1.0, d) for p in parents}
    centers = {c: parent_centers[parent_of[c]] + rng.normal(0.0, spec.child_spread, d) for c in children}
    if heldout_name:
        centers[heldout_name] = parent_centers["P0"] + rng.normal(0.0, spec.child_spread, d)
    proj = {
        "2d": rng.normal(0.0, 1.0 / np.sqrt(d), (spec.d2d, d)),
        "3d": rng.normal(0.0, 1.0 / np.sqrt(d), (spec.d3d, d)),
        "text": rng.normal(0.0, 1.0 / np.sqrt(d), (spec.dtext, d)),
        "region": rng.normal(0.0, 1.0 / np.sqrt(d), (spec.dregion, d)),
    }

    # entity table: label tokens and per-label keyword vocabularies
    table: dict[str, np.ndarray] = {}
    unmatched = children[-1] if spec.unmatched_label else None
    tokens = {q: f"ent_{q}" for q in [*parents, *children]}
    for p in parents:
        table[tokens[p]] = parent_centers[p] + 0.05 * rng.normal(size=d)
    for c in children:
        if c != unmatched:
            table[tokens[c]] = centers[c] + 0.05 * rng.normal(size=d)
    vocab = {
        q: [f"kw_{q}_{i}" for i in range(spec.vocab_per_label)]
        for q in [*children, *([heldout_name] if heldout_name else [])]
    }
    for q, words in vocab.items():
        for w in words:
            table[w] = centers[q] + spec.noise * rng.normal(size=d)

    hierarchy = LabelHierarchy(parents, children, dict(parent_of), tokens)
    validate_hierarchy(hierarchy)
    dims = {
        "n_frames": spec.n_frames,
        "d2d": spec.d2d,
        "d3d": spec.d3d,
        "dtext": spec.dtext,
        "regions": spec.regions,
        "dregion": spec.dregion,
    }

    def make_video(vid: str, labels: list[str], split: str) -> VideoRecord:
        slots = _segments(spec.n_frames, len(labels), rng)
        frame_labels = [labels[s] for s in slots]
        lat = np.stack([centers[q] for q in frame_labels]) + spec.noise * rng.normal(size=(spec.n_frames, d))
        f2d = lat @ proj["2d"].T + spec.noise * rng.normal(size=(spec.n_frames, spec.d2d))
        f3d = lat @ proj["3d"].T + spec.noise * rng.normal(size=(spec.n_frames, spec.d3d))
        mean_center = np.mean([centers[q] for q in labels], axis=0)
        text = proj["text"] @ mean_center + spec.noise * rng.normal(size=spec.dtext)
        reg_lat = lat[:, None, :] + spec.noise * rng.normal(size=(spec.n_frames, spec.regions, d))
        regions = reg_lat @ proj["region"].T + spec.noise * rng.normal(size=(spec.n_frames, spec.regions, spec.dregion))
        counts = np.full(spec.n_frames, spec.regions)
        partial = rng.random(spec.n_frames) < spec.partial_region_rate
        counts[partial] = rng.integers(0, spec.regions, size=int(partial.sum()))
        for j, c in enumerate(counts):
            regions[j, c:] = 0.0
        words: list[str] = []
        for q in labels:
            k = int(rng.integers(1, 3))
            words.extend(rng.choice(vocab[q], size=k, replace=False).tolist())
        if rng.random() < spec.oov_rate:
            words.append(f"oov_{int(rng.integers(1_000_000))}")
        words = [words[i] for i in rng.permutation(len(words))][: spec.max_keywords]
        paths = {}
        for name, arr in (("2d", f2d), ("3d", f3d), ("text", text), ("regions", regions)):
            rel = f"feats/{vid}_{name}.kft"
            save_tensor_file(arr.astype(np.float64), out / rel)
            paths[name] = out / rel
        return VideoRecord(
            video_id=vid,
            frame_2d=paths["2d"],
            clip_3d=paths["3d"],
            text=paths["text"],
            regions=paths["regions"],
            keywords=words,
            label_paths=[(q.split("_")[0], q) for q in labels],
            split=split,
            region_counts=None if counts.min() == spec.regions else counts.tolist(),
        )

    n_val = int(round(spec.val_fraction * spec.n_videos))
    n_test = int(round(spec.test_fraction * spec.n_videos))
    split_of = np.array(["train"] * spec.n_videos, dtype=object)
    perm = rng.permutation(spec.n_videos)
    split_of[perm[:n_val]] = "validation"
    split_of[perm[n_val : n_val + n_test]] = "test"

    records = []
    for i in range(spec.n_videos):
        k = 1 if rng.random() < 0.5 else 2
        labels = [children[j] for j in sorted(rng.choice(len(children), size=k, replace=False))]
        records.append(make_video(f"v{i:05d}", labels, str(split_of[i])))
    header = ManifestHeader(hierarchy, dims, spec.max_keywords, embeddings="kg.txt")
    write_manifest(out / "manifest.jsonl", header, records)

    heldout = None
    if heldout_name:
        held_records = [make_video(f"h{i:05d}", [heldout_name], "test") for i in range(spec.n_heldout_videos)]
        h_ext = LabelHierarchy(parents, [*children, heldout_name], {**parent_of, heldout_name: "P0"}, {**tokens})
        h_ext.tokens[heldout_name] = f"ent_{heldout_name}"
        write_manifest(out / "heldout.jsonl", ManifestHeader(h_ext, dims, spec.max_keywords, "kg.txt"), held_records)
        heldout = {
            "name": heldout_name,
            "parent": "P0",
            "token": f"ent_{heldout_name}",
            "center": centers[heldout_name].tolist(),
            "manifest": "heldout.jsonl",
        }

    KnowledgeStore(table).save(out / "kg.txt")
    truth = SyntheticTruth(
        spec=spec,
        level2=children,
        parent_of=parent_of,
        centers={q: v.tolist() for q, v in centers.items()},
        parent_centers={p: v.tolist() for p, v in parent_centers.items()},
        proj_2d=proj["2d"].tolist(),
        proj_3d=proj["3d"].tolist(),
        heldout=heldout,
    )
    with open(out / "truth.json", "w", encoding="utf-8") as fh:
        json.dump(truth.to_json(), fh, sort_keys=True)
        fh.write("\n")
    return truth


def centroid_oracle(
    records: list[VideoRecord],
    truth: SyntheticTruth,
    cache: FeatureCache | None = None,
    labels: list[str] | None = None,
    min_frames: int = 2,
) -> list[set[str]]:
    """Predict label sets by per-frame nearest true center with frame voting.

    Each frame's latent point is recovered by least squares from its 2D and 3D
    features; labels winning at least ``min_frames`` frames are predicted
    (the plurality label if none does).
    """
    cache = cache or FeatureCache()
    labels = labels or truth.level2
    C = np.array([truth.centers[q] for q in labels])
    A = np.vstack([np.array(truth.proj_2d), np.array(truth.proj_3d)])
    pinv = np.linalg.pinv(A)
    out = []
    for rec in records:
        f = cache.get(rec)
        lat = np.hstack([f.frame_2d, f.clip_3d]) @ pinv.T
        dist = ((lat[:, None, :] - C[None, :, :]) ** 2).sum(-1)
        votes = np.bincount(dist.argmin(axis=1), minlength=len(labels))
        chosen = {labels[i] for i in np.flatnonzero(votes >= min_frames)}
        out.append(chosen or {labels[int(votes.argmax())]})
    return out


def oracle_f1(records: list[VideoRecord], truth: SyntheticTruth, cache: FeatureCache | None = None) -> float:
    preds = centroid_oracle(records, truth, cache)
    gold = [{c for _, c in r.label_paths} for r in records]
    return micro_f1(preds, gold)[0]

"""Manifests, label hierarchy, knowledge embeddings and feature loading."""

from __future__ import annotations

import json
import logging
import os
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import ParameterStore, Tensor
from .tensorio import TensorFormatError, load_tensor_file, peek_dims

log = logging.getLogger(__name__)

DEFAULT_MAX_KEYWORDS = 10


class ManifestParseError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


class ValidationError(ValueError):
    """A record or hierarchy violates an invariant."""


class OrphanLabelError(ValidationError):
    pass


class DuplicateLabelError(ValidationError):
    pass


class EmptyLevelError(ValidationError):
    pass


class FeatureError(ValidationError):
    """A feature file is missing or has the wrong dims."""


# ---------------------------------------------------------------------------
# hierarchy


@dataclass
class LabelHierarchy:
    level1: list[str]
    level2: list[str]
    parent: dict[str, str]
    tokens: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self._index1 = {name: i for i, name in enumerate(self.level1)}
        self._index2 = {name: i for i, name in enumerate(self.level2)}

    @property
    def parent_index(self) -> np.ndarray:
        """For every level-2 label, the index of its parent in ``level1``."""
        return np.array([self._index1[self.parent[c]] for c in self.level2], dtype=np.intp)

    def index1(self, name: str) -> int:
        return self._index1[name]

    def index2(self, name: str) -> int:
        return self._index2[name]

    def token(self, label: str) -> str:
        return self.tokens.get(label, label)

    def with_child(self, name: str, parent: str, token: str | None = None) -> LabelHierarchy:
        """A copy with one extra level-2 label appended."""
        tokens = dict(self.tokens)
        if token is not None:
            tokens[name] = token
        h = LabelHierarchy(list(self.level1), [*self.level2, name], {**self.parent, name: parent}, tokens)
        validate_hierarchy(h)
        return h

    def to_json(self) -> dict:
        return {
            "level1": [{"name": n, **({"token": self.tokens[n]} if n in self.tokens else {})} for n in self.level1],
            "level2": [
                {"name": n, "parent": self.parent[n], **({"token": self.tokens[n]} if n in self.tokens else {})}
                for n in self.level2
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> LabelHierarchy:
        def name_of(entry):
            return entry if isinstance(entry, str) else entry["name"]

        level1 = [name_of(e) for e in obj["level1"]]
        level2 = [name_of(e) for e in obj["level2"]]
        parent = {}
        tokens = {}
        for e in obj["level2"]:
            if isinstance(e, str) or "parent" not in e:
                raise OrphanLabelError(f"level-2 label {name_of(e)!r} has no parent")
            parent[e["name"]] = e["parent"]
        for e in [*obj["level1"], *obj["level2"]]:
            if isinstance(e, dict) and "token" in e:
                tokens[e["name"]] = e["token"]
        return cls(level1, level2, parent, tokens)


def validate_hierarchy(h: LabelHierarchy) -> None:
    if not h.level1:
        raise EmptyLevelError("level-1 label list is empty")
    if not h.level2:
        raise EmptyLevelError("level-2 label list is empty")
    seen: set[str] = set()
    for name in [*h.level1, *h.level2]:
        if name in seen:
            raise DuplicateLabelError(f"duplicate label {name!r}")
        seen.add(name)
    level1 = set(h.level1)
    for child in h.level2:
        p = h.parent.get(child)
        if p is None:
            raise OrphanLabelError(f"level-2 label {child!r} has no parent")
        if p not in level1:
            raise OrphanLabelError(f"level-2 label {child!r} maps to unknown parent {p!r}")
    extra = set(h.parent) - set(h.level2)
    if extra:
        raise OrphanLabelError(f"parent map names unknown children {sorted(extra)}")


# ---------------------------------------------------------------------------
# knowledge store


class KnowledgeStore:
    """Token -> entity embedding, with trainable fallbacks for unmatched labels.

    Pretrained vectors are frozen. Fallback vectors live in a
    :class:`ParameterStore` under ``kg_fallback.<token>`` so that the optimizer
    and checkpoints see them.
    """

    def __init__(self, table: dict[str, np.ndarray], d_kg: int | None = None, dtype=np.float64):
        widths = {len(v) for v in table.values()}
        if len(widths) > 1:
            raise ValidationError(f"embedding table mixes widths {sorted(widths)}")
        if d_kg is None:
            if not widths:
                raise ValidationError("empty embedding table needs an explicit d_kg")
            d_kg = widths.pop()
        elif widths and widths != {d_kg}:
            raise ValidationError(f"embedding width {widths} != d_kg {d_kg}")
        self.d_kg = int(d_kg)
        self._table = {k: Tensor(np.asarray(v, dtype=dtype)) for k, v in table.items()}
        self.params: ParameterStore | None = None
        self._warned: set[str] = set()

    def __contains__(self, token: str) -> bool:
        return token in self._table

    def __len__(self) -> int:
        return len(self._table)

    def tokens(self) -> list[str]:
        return list(self._table)

    def add(self, token: str, vector) -> None:
        vec = np.asarray(vector, dtype=np.float64)
        if vec.shape != (self.d_kg,):
            raise ValidationError(f"vector for {token!r} has dims {vec.shape}, expected ({self.d_kg},)")
        self._table[token] = Tensor(vec)

    def bind(self, params: ParameterStore) -> None:
        self.params = params

    def lookup(self, token: str, role: str = "keyword") -> Tensor | None:
        """Pretrained vector, a fallback (labels only), or ``None`` (keywords)."""
        if role not in ("keyword", "label"):
            raise ValueError(f"role must be keyword or label, got {role!r}")
        hit = self._table.get(token)
        if hit is not None:
            return hit
        if role == "keyword":
            if token not in self._warned:
                self._warned.add(token)
                log.warning("keyword %r has no entity embedding; skipped", token)
            return None
        if self.params is None:
            raise ValidationError("label fallback needs a bound ParameterStore")
        name = f"kg_fallback.{token}"
        if name in self.params:
            return self.params[name]
        return self.params.gaussian_init(name, (self.d_kg,))

    @classmethod
    def load(cls, path: str | os.PathLike, d_kg: int | None = None) -> KnowledgeStore:
        table = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip("\n").split(" ")
                if not parts or parts == [""]:
                    continue
                # Numberbatch text dumps may open with a "count width" line
                if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                    continue
                try:
                    table[parts[0]] = np.array([float(v) for v in parts[1:]])
                except ValueError as exc:
                    raise ManifestParseError(path, lineno, f"bad embedding value: {exc}") from exc
        return cls(table, d_kg=d_kg)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for token, vec in self._table.items():
                fh.write(token + " " + " ".join(repr(float(v)) for v in vec.data) + "\n")


def lookup_embedding(store: KnowledgeStore, token: str, role: str) -> Tensor | None:
    return store.lookup(token, role)


# ---------------------------------------------------------------------------
# records


@dataclass
class VideoRecord:
    video_id: str
    frame_2d: Path
    clip_3d: Path
    text: Path
    regions: Path
    keywords: list[str]
    label_paths: list[tuple[str, str]]
    split: str = "train"
    region_counts: list[int] | None = None

    def to_json(self, root: Path) -> dict:
        obj = {
            "video_id": self.video_id,
            "frame_2d": _rel(self.frame_2d, root),
            "clip_3d": _rel(self.clip_3d, root),
            "text": _rel(self.text, root),
            "regions": _rel(self.regions, root),
            "keywords": list(self.keywords),
            "labels": [list(p) for p in self.label_paths],
            "split": self.split,
        }
        if self.region_counts is not None:
            obj["region_counts"] = list(self.region_counts)
        return obj


def _rel(p: Path, root: Path) -> str:
    try:
        return Path(p).relative_to(root).as_posix()
    except ValueError:
        return str(p)


@dataclass
class DatasetSplit:
    train: list[VideoRecord]
    validation: list[VideoRecord]
    test: list[VideoRecord]

    def __post_init__(self):
        ids = [r.video_id for r in [*self.train, *self.validation, *self.test]]
        if len(ids) != len(set(ids)):
            raise ValidationError("splits share video ids")


def split_records(records: Iterable[VideoRecord]) -> DatasetSplit:
    parts: dict[str, list[VideoRecord]] = {"train": [], "validation": [], "test": []}
    for r in records:
        parts[r.split].append(r)
    return DatasetSplit(parts["train"], parts["validation"], parts["test"])


@dataclass
class ManifestHeader:
    hierarchy: LabelHierarchy
    dims: dict[str, int]
    max_keywords: int = DEFAULT_MAX_KEYWORDS
    embeddings: str | None = None

    def to_json(self) -> dict:
        obj = {"hierarchy": self.hierarchy.to_json(), "dims": dict(self.dims), "max_keywords": self.max_keywords}
        if self.embeddings is not None:
            obj["embeddings"] = self.embeddings
        return obj


_SPLITS = ("train", "validation", "test")
_DIM_KEYS = ("n_frames", "d2d", "d3d", "dtext", "regions", "dregion")


def _parse_record(obj: dict, root: Path, path, lineno: int) -> VideoRecord:
    try:
        rec = VideoRecord(
            video_id=str(obj["video_id"]),
            frame_2d=root / obj["frame_2d"],
            clip_3d=root / obj["clip_3d"],
            text=root / obj["text"],
            regions=root / obj["regions"],
            keywords=[str(k) for k in obj.get("keywords", [])],
            label_paths=[(str(a), str(b)) for a, b in obj["labels"]],
            split=obj.get("split", "train"),
            region_counts=obj.get("region_counts"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestParseError(path, lineno, f"malformed record: {exc!r}") from exc
    return rec


def validate_record(rec: VideoRecord, header: ManifestHeader, dim_cache: dict | None = None) -> None:
    h = header.hierarchy
    where = f"record {rec.video_id!r}"
    if rec.split not in _SPLITS:
        raise ValidationError(f"{where}: unknown split {rec.split!r}")
    if not rec.label_paths:
        raise ValidationError(f"{where}: no label paths")
    for p1, p2 in rec.label_paths:
        if p2 not in h.parent:
            raise ValidationError(f"{where}: unknown level-2 label {p2!r}")
        if h.parent[p2] != p1:
            raise ValidationError(f"{where}: path ({p1!r}, {p2!r}) but parent of {p2!r} is {h.parent[p2]!r}")
    if len(rec.keywords) > header.max_keywords:
        raise ValidationError(f"{where}: {len(rec.keywords)} keywords exceed max {header.max_keywords}")
    d = header.dims
    expected = {
        "frame_2d": (d["n_frames"], d["d2d"]),
        "clip_3d": (d["n_frames"], d["d3d"]),
        "text": (d["dtext"],),
        "regions": (d["n_frames"], d["regions"], d["dregion"]),
    }
    cache = {} if dim_cache is None else dim_cache
    for attr, want in expected.items():
        fpath = getattr(rec, attr)
        if fpath not in cache:
            if not Path(fpath).is_file():
                raise FeatureError(f"{where}: missing {attr} file {fpath}")
            try:
                cache[fpath] = peek_dims(fpath)
            except TensorFormatError as exc:
                raise FeatureError(f"{where}: {attr}: {exc}") from exc
        if tuple(cache[fpath]) != want:
            raise FeatureError(f"{where}: {attr} dims {list(cache[fpath])} != declared {list(want)}")
    if rec.region_counts is not None:
        if len(rec.region_counts) != d["n_frames"] or any(
            not 0 <= c <= d["regions"] for c in rec.region_counts
        ):
            raise ValidationError(f"{where}: region_counts must give 0..{d['regions']} for each frame")


def read_manifest(path: str | os.PathLike) -> tuple[ManifestHeader, list[VideoRecord]]:
    """Parse and validate a manifest, returning its header as well."""
    path = Path(path)
    root = path.parent
    records: list[VideoRecord] = []
    header: ManifestHeader | None = None
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(path, lineno, f"invalid JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise ManifestParseError(path, lineno, "expected a JSON object")
            if header is None:
                try:
                    hier = LabelHierarchy.from_json(obj["hierarchy"])
                    dims = {k: int(obj["dims"][k]) for k in _DIM_KEYS}
                except (KeyError, TypeError, ValueError) as exc:
                    raise ManifestParseError(path, lineno, f"malformed header: {exc!r}") from exc
                validate_hierarchy(hier)
                if any(v <= 0 for v in dims.values()):
                    raise ValidationError(f"header dims must be positive: {dims}")
                header = ManifestHeader(hier, dims, int(obj.get("max_keywords", DEFAULT_MAX_KEYWORDS)), obj.get("embeddings"))
                continue
            records.append(_parse_record(obj, root, path, lineno))
    if header is None:
        raise ManifestParseError(path, 1, "missing header line")
    ids = set()
    cache: dict = {}
    for rec in records:
        if rec.video_id in ids:
            raise ValidationError(f"duplicate video id {rec.video_id!r}")
        ids.add(rec.video_id)
        validate_record(rec, header, cache)
    return header, records


def load_manifest(path: str | os.PathLike) -> tuple[list[VideoRecord], LabelHierarchy]:
    header, records = read_manifest(path)
    return records, header.hierarchy


def write_manifest(path: str | os.PathLike, header: ManifestHeader, records: Sequence[VideoRecord]) -> None:
    path = Path(path)
    root = path.parent
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header.to_json(), sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec.to_json(root), sort_keys=True) + "\n")


def load_knowledge(header: ManifestHeader, manifest_path: str | os.PathLike) -> KnowledgeStore | None:
    if header.embeddings is None:
        return None
    return KnowledgeStore.load(Path(manifest_path).parent / header.embeddings)


# ---------------------------------------------------------------------------
# features in memory


@dataclass
class VideoFeatures:
    frame_2d: np.ndarray
    clip_3d: np.ndarray
    text: np.ndarray
    regions: np.ndarray
    region_counts: np.ndarray


def load_features(rec: VideoRecord, dtype=np.float64) -> VideoFeatures:
    regions = load_tensor_file(rec.regions).data.astype(dtype)
    counts = (
        np.full(regions.shape[0], regions.shape[1], dtype=np.intp)
        if rec.region_counts is None
        else np.asarray(rec.region_counts, dtype=np.intp)
    )
    return VideoFeatures(
        frame_2d=load_tensor_file(rec.frame_2d).data.astype(dtype),
        clip_3d=load_tensor_file(rec.clip_3d).data.astype(dtype),
        text=load_tensor_file(rec.text).data.astype(dtype),
        regions=regions,
        region_counts=counts,
    )


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("SCENEFORGE_THREADS", "1")))
    except ValueError:
        return 1


class FeatureCache:
    """Loads feature files once per record."""

    def __init__(self, dtype=np.float64):
        self.dtype = dtype
        self._cache: dict[str, VideoFeatures] = {}

    def get(self, rec: VideoRecord) -> VideoFeatures:
        hit = self._cache.get(rec.video_id)
        if hit is None:
            hit = self._cache[rec.video_id] = load_features(rec, self.dtype)
        return hit

    def preload(self, records: Sequence[VideoRecord]) -> None:
        todo = [r for r in records if r.video_id not in self._cache]
        with ThreadPoolExecutor(max_workers=worker_count()) as pool:
            for rec, feats in zip(todo, pool.map(lambda r: load_features(r, self.dtype), todo)):
                self._cache[rec.video_id] = feats

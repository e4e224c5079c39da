"""Checkpoint container: JSON index followed by KFT1 blobs.

Layout: ``b"KFCK"``, a version byte, a little-endian u32 index length, the
UTF-8 JSON index, then the concatenated KFT1 tensors. The index lists
``[name, offset, length]`` per tensor (offsets relative to the first blob)
plus the train-state scalars, generator states and the run config.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .numerics import ParameterStore
from .tensorio import TruncationError, decode, encode
from .training import TrainState

MAGIC = b"KFCK"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


class CheckpointVersionError(CheckpointFormatError):
    pass


class CheckpointTruncationError(TruncationError):
    pass


@dataclass
class Checkpoint:
    store: ParameterStore
    state: TrainState
    config: RunConfig


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def to_bytes(store: ParameterStore, state: TrainState, config: RunConfig | None = None) -> bytes:
    blobs: list[bytes] = []
    entries = []
    offset = 0

    def put(name, arr):
        nonlocal offset
        blob = encode(np.asarray(arr, dtype=store.dtype))
        entries.append([name, offset, len(blob)])
        blobs.append(blob)
        offset += len(blob)

    for name, t in store.items():
        put(f"param/{name}", t.data)
    for name in sorted(state.m):
        put(f"adam_m/{name}", state.m[name])
        put(f"adam_v/{name}", state.v[name])
    index = {
        "config": (config or RunConfig()).to_flat(),
        "store": {
            "seed": store.seed,
            "dtype": store.dtype.name,
            "init_std": store.init_std,
            "rng": _rng_state(store.rng),
        },
        "state": {
            "epoch": state.epoch,
            "step": state.step,
            "best_metric": state.best_metric,
            "best_epoch": state.best_epoch,
            "patience_left": state.patience_left,
            "rng": _rng_state(state.rng),
        },
        "tensors": entries,
    }
    raw = json.dumps(index, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + bytes([VERSION]) + struct.pack("<I", len(raw)) + raw + b"".join(blobs)


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < 9:
        raise CheckpointTruncationError("checkpoint shorter than its fixed header")
    if buf[:4] != MAGIC:
        raise CheckpointFormatError(f"bad checkpoint magic {bytes(buf[:4])!r}")
    if buf[4] != VERSION:
        raise CheckpointVersionError(f"checkpoint version {buf[4]}, expected {VERSION}")
    (n,) = struct.unpack("<I", buf[5:9])
    if len(buf) < 9 + n:
        raise CheckpointTruncationError("checkpoint ends inside its index")
    try:
        index = json.loads(buf[9 : 9 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable checkpoint index: {exc}") from exc
    base = 9 + n
    end = base + sum(e[2] for e in index["tensors"])
    if len(buf) < end:
        raise CheckpointTruncationError(f"checkpoint has {len(buf)} bytes, index needs {end}")
    if len(buf) > end:
        raise CheckpointFormatError("trailing bytes after the last tensor")

    meta = index["store"]
    store = ParameterStore(meta["seed"], dtype=np.dtype(meta["dtype"]), init_std=meta["init_std"])
    store.rng = _rng_from(meta["rng"])
    st = index["state"]
    state = TrainState(
        epoch=st["epoch"],
        step=st["step"],
        best_metric=float(st["best_metric"]),
        best_epoch=st["best_epoch"],
        patience_left=st["patience_left"],
        rng=_rng_from(st["rng"]),
    )
    for name, off, length in index["tensors"]:
        arr = decode(buf[base + off : base + off + length])
        kind, _, pname = name.partition("/")
        if kind == "param":
            store.register(pname, arr)
        elif kind == "adam_m":
            state.m[pname] = arr
        elif kind == "adam_v":
            state.v[pname] = arr
        else:
            raise CheckpointFormatError(f"unknown tensor kind in {name!r}")
    return Checkpoint(store, state, RunConfig.from_flat(index["config"]))


def save_checkpoint(store: ParameterStore, state: TrainState, path: str | os.PathLike, config: RunConfig | None = None) -> None:
    Path(path).write_bytes(to_bytes(store, state, config))


def read_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def load_checkpoint(path: str | os.PathLike) -> tuple[ParameterStore, TrainState]:
    ck = read_checkpoint(path)
    return ck.store, ck.state

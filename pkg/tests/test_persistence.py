import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from sceneforge.checkpoint import (
    CheckpointFormatError,
    CheckpointTruncationError,
    CheckpointVersionError,
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
)
from sceneforge.config import RunConfig
from sceneforge.inference import Selection, infer
from sceneforge.pipeline import build_model
from sceneforge.tensorio import (
    TensorFormatError,
    TruncationError,
    decode,
    encode,
    load_tensor_file,
    peek_dims,
    save_tensor_file,
)
from sceneforge.training import TrainState
from tests.conftest import small_config

tensors = arrays(
    st.sampled_from([np.float32, np.float64]),
    array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=6),
    elements=st.floats(allow_nan=False, allow_infinity=False, width=32),
)


@given(tensors)
def test_kft1_round_trip_bit_exact(arr):
    out = decode(encode(arr))
    assert out.dtype == arr.dtype and out.shape == arr.shape
    assert out.tobytes() == arr.tobytes()


def test_kft1_layout():
    buf = encode(np.arange(6, dtype=np.float64).reshape(2, 3))
    assert buf[:4] == b"KFT1" and buf[4] == 1 and buf[5] == 2
    assert struct.unpack("<2I", buf[6:14]) == (2, 3)
    assert len(buf) == 14 + 6 * 8


def test_large_f32_file_round_trip(tmp_path):
    arr = np.random.default_rng(0).normal(size=(12, 2048)).astype(np.float32)
    save_tensor_file(arr, tmp_path / "x.kft")
    assert load_tensor_file(tmp_path / "x.kft").data.tobytes() == arr.tobytes()
    assert peek_dims(tmp_path / "x.kft") == (12, 2048)


def test_kft1_errors():
    good = encode(np.ones((2, 2)))
    with pytest.raises(TensorFormatError):
        decode(b"XFT1" + good[4:])
    with pytest.raises(TensorFormatError):
        decode(good[:4] + bytes([7]) + good[5:])
    rank4 = b"KFT1" + bytes([1, 4]) + struct.pack("<4I", 1, 1, 1, 1) + b"\0" * 8
    with pytest.raises(TensorFormatError):
        decode(rank4)
    with pytest.raises(TruncationError):
        decode(good[:-1])
    with pytest.raises(TensorFormatError):
        encode(np.ones((1, 1, 1, 1)))


def _trained_like(corpus):
    model = build_model(small_config(), corpus)
    state = TrainState.fresh(model.store, seed=3)
    r = np.random.default_rng(5)
    for name in state.m:
        state.m[name] = r.normal(size=state.m[name].shape)
        state.v[name] = r.random(size=state.v[name].shape)
    state.epoch, state.step, state.best_metric, state.best_epoch = 4, 40, 0.75, 3
    state.rng.random(7)
    return model, state


def test_checkpoint_save_load_save_identical(corpus, tmp_path):
    model, state = _trained_like(corpus)
    cfg = small_config()
    save_checkpoint(model.store, state, tmp_path / "a.ck", cfg)
    store, st2 = load_checkpoint(tmp_path / "a.ck")
    save_checkpoint(store, st2, tmp_path / "b.ck", cfg)
    assert (tmp_path / "a.ck").read_bytes() == (tmp_path / "b.ck").read_bytes()
    assert st2.epoch == 4 and st2.best_metric == 0.75
    assert st2.rng.random() == state.rng.random()
    for name, t in model.store.items():
        assert store[name].data.tobytes() == t.data.tobytes()


def test_checkpoint_errors(corpus):
    model, state = _trained_like(corpus)
    buf = to_bytes(model.store, state, RunConfig())
    with pytest.raises(CheckpointTruncationError):
        from_bytes(buf[:-4])
    with pytest.raises(TruncationError):
        from_bytes(buf[:7])
    with pytest.raises(CheckpointVersionError):
        from_bytes(buf[:4] + bytes([9]) + buf[5:])
    with pytest.raises(CheckpointFormatError):
        from_bytes(b"NOPE" + buf[4:])
    with pytest.raises(CheckpointFormatError):
        from_bytes(buf + b"\0")


def test_infer_after_reload_is_bit_exact(corpus, tmp_path):
    model, state = _trained_like(corpus)
    cfg = small_config()
    before = infer(model, corpus.records, Selection(threshold=0.0))
    save_checkpoint(model.store, state, tmp_path / "m.ck", cfg)
    store, _ = load_checkpoint(tmp_path / "m.ck")
    again = infer(build_model(cfg, corpus, store=store), corpus.records, Selection(threshold=0.0))
    assert [p.scores for p in before] == [p.scores for p in again]
    assert [p.selected for p in before] == [p.selected for p in again]

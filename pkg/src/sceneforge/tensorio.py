"""KFT1 binary tensor container.

Layout: ``b"KFT1"``, one dtype byte (0 = f32, 1 = f64), one rank byte
(1..3), ``rank`` little-endian u32 extents, then the row-major
little-endian payload.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .numerics import Tensor

MAGIC = b"KFT1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
MAX_RANK = 3


class TensorFormatError(ValueError):
    """Header is not a valid KFT1 header."""


class TruncationError(TensorFormatError):
    """Payload is shorter or longer than the header announces."""


def encode(array) -> bytes:
    arr = np.asarray(array.data if isinstance(array, Tensor) else array)
    if arr.dtype not in _CODES:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}")
    if not 1 <= arr.ndim <= MAX_RANK:
        raise TensorFormatError(f"rank must be 1..{MAX_RANK}, got {arr.ndim}")
    if any(n <= 0 for n in arr.shape):
        raise TensorFormatError(f"extents must be positive, got {arr.shape}")
    code = _CODES[arr.dtype]
    header = MAGIC + bytes([code, arr.ndim]) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def read_header(buf: bytes) -> tuple[np.dtype, tuple[int, ...], int]:
    """Parse a header; returns (dtype, shape, header length)."""
    if len(buf) < 6:
        raise TruncationError("buffer shorter than the fixed header")
    if buf[:4] != MAGIC:
        raise TensorFormatError(f"bad magic {bytes(buf[:4])!r}")
    code, rank = buf[4], buf[5]
    if code not in _DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    if not 1 <= rank <= MAX_RANK:
        raise TensorFormatError(f"rank {rank} outside 1..{MAX_RANK}")
    end = 6 + 4 * rank
    if len(buf) < end:
        raise TruncationError("buffer ends inside the extent list")
    shape = struct.unpack(f"<{rank}I", bytes(buf[6:end]))
    if any(n == 0 for n in shape):
        raise TensorFormatError(f"zero extent in {shape}")
    return _DTYPES[code], tuple(shape), end


def decode(buf: bytes) -> np.ndarray:
    dtype, shape, start = read_header(buf)
    expected = int(np.prod(shape)) * dtype.itemsize
    payload = len(buf) - start
    if payload != expected:
        raise TruncationError(f"payload has {payload} bytes, header implies {expected}")
    arr = np.frombuffer(bytes(buf[start:]), dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def save_tensor_file(tensor, path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode(tensor))


def load_tensor_file(path: str | os.PathLike) -> Tensor:
    return Tensor(decode(Path(path).read_bytes()))


def peek_dims(path: str | os.PathLike) -> tuple[int, ...]:
    """Read only the header of a file and check the file size against it."""
    p = Path(path)
    with p.open("rb") as fh:
        head = fh.read(6 + 4 * MAX_RANK)
    dtype, shape, start = read_header(head)
    if p.stat().st_size != start + int(np.prod(shape)) * dtype.itemsize:
        raise TruncationError(f"{p}: size does not match header")
    return shape

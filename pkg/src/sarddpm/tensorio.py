"""Flat-binary tensor files shared by datasets, samples and feature matrices.

Header, all little-endian: 4-byte magic ``b"SDTB"``, uint32 version,
uint32 dtype code, uint64 rank, then ``rank`` uint64 dims. The row-major
little-endian payload follows immediately.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from sarddpm.checkpoint import atomic_write

MAGIC = b"SDTB"
VERSION = 1
DTYPE_CODES = {1: "<f4", 2: "<f8", 3: "<i8", 4: "|u1", 5: "<i4"}
_CODE_OF = {np.dtype(v): k for k, v in DTYPE_CODES.items()}
_HEAD = struct.Struct("<4sIIQ")


class TensorFormatError(ValueError):
    pass


def encode_tensor(array) -> bytes:
    arr = np.asarray(array)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    code = _CODE_OF.get(np.dtype(dt))
    if code is None:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}")
    arr = np.ascontiguousarray(arr, dtype=DTYPE_CODES[code])
    head = _HEAD.pack(MAGIC, VERSION, code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def decode_tensor(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < _HEAD.size:
        raise TensorFormatError(f"{source}: truncated tensor header")
    magic, version, code, rank = _HEAD.unpack_from(blob)
    if magic != MAGIC:
        raise TensorFormatError(f"{source}: not a flat-binary tensor (bad magic)")
    if version != VERSION:
        raise TensorFormatError(f"{source}: unsupported tensor format version {version}")
    if code not in DTYPE_CODES:
        raise TensorFormatError(f"{source}: unknown dtype code {code}")
    dims_end = _HEAD.size + 8 * rank
    if len(blob) < dims_end:
        raise TensorFormatError(f"{source}: truncated tensor header")
    shape = struct.unpack_from(f"<{rank}Q", blob, _HEAD.size)
    dtype = np.dtype(DTYPE_CODES[code])
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(blob) - dims_end != expected:
        raise TensorFormatError(f"{source}: payload is {len(blob) - dims_end} bytes, header implies {expected}")
    return np.frombuffer(blob, dtype=dtype, offset=dims_end).reshape(shape).copy()


def write_tensor(path, array) -> None:
    atomic_write(path, encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    return decode_tensor(path.read_bytes(), source=str(path))

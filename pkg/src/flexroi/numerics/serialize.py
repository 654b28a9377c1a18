"""Binary tensor format: rank and extents header, then little-endian float64 payload.

Layout: ``b"FLXT"`` magic, uint32 rank, ``rank`` x uint64 extents, then
``prod(extents)`` float64 values in row-major order. All integers are
little-endian.
"""
from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np

from ..errors import PersistedStateError

MAGIC = b"FLXT"


def write_tensor(stream: BinaryIO, array) -> int:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    stream.write(header)
    stream.write(arr.tobytes(order="C"))
    return len(header) + arr.nbytes


def read_tensor(stream: BinaryIO) -> np.ndarray:
    magic = stream.read(4)
    if magic != MAGIC:
        raise PersistedStateError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", stream.read(4))
    shape = struct.unpack(f"<{rank}Q", stream.read(8 * rank))
    count = int(np.prod(shape)) if rank else 1
    payload = stream.read(8 * count)
    if len(payload) != 8 * count:
        raise PersistedStateError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


def tensor_to_bytes(array) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))


def save_tensor(path, array) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)

"""Binary tensor files.

Layout: the magic ``AVTNSR1\\0``, a little-endian u32 rank, ``rank`` little-endian
u64 dimensions, then the row-major float32 little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ParseError

MAGIC = b"AVTNSR1\x00"


def encode_tensor(values) -> bytes:
    arr = np.ascontiguousarray(np.asarray(values, dtype="<f4"))
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(buf: bytes, path=None) -> np.ndarray:
    if buf[:8] != MAGIC:
        raise ParseError("bad magic bytes, not a tensor file", path, 0)
    if len(buf) < 12:
        raise ParseError("truncated header", path, 8)
    (rank,) = struct.unpack_from("<I", buf, 8)
    offset = 12 + 8 * rank
    if len(buf) < offset:
        raise ParseError(f"truncated dimension list for rank {rank}", path, 12)
    dims = struct.unpack_from(f"<{rank}Q", buf, 12)
    count = int(np.prod(dims)) if rank else 1
    expected = offset + 4 * count
    if len(buf) != expected:
        raise ParseError(
            f"payload size mismatch for shape {tuple(dims)}: expected {expected} bytes, got {len(buf)}",
            path,
            offset,
        )
    return np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(dims).astype(np.float64)


def save_tensor(path, values) -> None:
    path = Path(path)
    try:
        path.write_bytes(encode_tensor(values))
    except OSError as exc:
        raise type(exc)(f"cannot write tensor file {path}: {exc}") from exc


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise type(exc)(f"cannot read tensor file {path}: {exc}") from exc
    return decode_tensor(buf, path)

"""Binary tensor fixtures.

Layout: magic ``MLBT``, version byte 0x01, unsigned 32-bit little-endian
rank, rank unsigned 32-bit little-endian extents, then the values as
row-major 64-bit little-endian IEEE-754. Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"MLBT"
VERSION = 1


def tensor_bytes(array) -> bytes:
    arr = np.asarray(array, dtype="<f8")
    if any(e <= 0 for e in arr.shape):
        raise FormatError(f"extents must be positive, got shape {arr.shape}")
    if any(e >= 2**32 for e in arr.shape):
        raise FormatError(f"extent exceeds 32 bits: {arr.shape}")
    header = MAGIC + struct.pack("<B", VERSION) + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return header + arr.tobytes(order="C")


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < 9:
        raise FormatError("tensor blob truncated before header")
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic bytes {blob[:4]!r}, expected {MAGIC!r}")
    version = blob[4]
    if version != VERSION:
        raise FormatError(f"unsupported tensor format version {version}")
    (rank,) = struct.unpack_from("<I", blob, 5)
    offset = 9
    if len(blob) < offset + 4 * rank:
        raise FormatError("tensor blob truncated in extents")
    extents = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
    offset += 4 * rank
    if any(e == 0 for e in extents):
        raise FormatError(f"extents must be positive, got {extents}")
    count = int(np.prod(extents, dtype=np.int64)) if rank else 1
    expected = offset + 8 * count
    if len(blob) != expected:
        raise FormatError(f"tensor blob has {len(blob)} bytes, expected {expected}")
    flat = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
    return flat.reshape(extents).astype(np.float64)


def write_tensor(path, array) -> None:
    Path(path).write_bytes(tensor_bytes(array))


def read_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())

"""Raw volume files (``.dvol``).

Layout, all little-endian::

    b"DVOL" | u32 version=1 | u8 dtype (0=f32, 1=u16) | u8 rank | rank x u32 extents | payload
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DVOL"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<u2")}
RANKS = (4, 5)


class VolumeError(ValueError):
    pass


def header_size(rank: int) -> int:
    return 4 + 4 + 1 + 1 + 4 * rank


def save_volume(arr, path: str | Path) -> int:
    """Float arrays are stored as f32, integer arrays as u16 labels; returns bytes written."""
    arr = np.asarray(arr)
    if arr.ndim not in RANKS:
        raise VolumeError(f"rank must be 4 or 5, got shape {arr.shape}")
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
        if arr.size and (arr.min() < 0 or arr.max() > 0xFFFF):
            raise VolumeError("label values must fit in u16")
        code = 1
    else:
        code = 0
    payload = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
    blob = MAGIC + struct.pack("<IBB", VERSION, code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(blob + payload)
    return len(blob) + len(payload)


def load_volume(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 10:
        raise VolumeError(f"header truncated at offset {len(blob)}: expected at least 10 bytes, got {len(blob)}")
    if blob[:4] != MAGIC:
        raise VolumeError(f"bad magic {blob[:4]!r} at offset 0, expected {MAGIC!r}")
    version, code, rank = struct.unpack_from("<IBB", blob, 4)
    if version != VERSION:
        raise VolumeError(f"unsupported version {version} at offset 4")
    if code not in DTYPES:
        raise VolumeError(f"unknown dtype code {code} at offset 8")
    if rank not in RANKS:
        raise VolumeError(f"unsupported rank {rank} at offset 9")
    hs = header_size(rank)
    if len(blob) < hs:
        raise VolumeError(f"extents truncated at offset {len(blob)}: expected {hs} header bytes, got {len(blob)}")
    shape = struct.unpack_from(f"<{rank}I", blob, 10)
    dtype = DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    actual = len(blob) - hs
    if actual != expected:
        raise VolumeError(f"payload at offset {hs}: expected {expected} bytes, got {actual}")
    return np.frombuffer(blob, dtype=dtype, offset=hs).reshape(shape).copy()

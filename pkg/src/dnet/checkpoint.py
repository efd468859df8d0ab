"""Binary weight checkpoints (``.dnw``).

Layout, all little-endian::

    b"DNW1" | u32 version=1 | u64 count
    count x ( u16 path_len | utf-8 path | u8 rank | rank x u32 extents | f32 data )
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DNW1"
VERSION = 1
HEADER_SIZE = 16


class CheckpointError(ValueError):
    pass


def record_size(path: str, shape: tuple[int, ...]) -> int:
    return 2 + len(path.encode()) + 1 + 4 * len(shape) + 4 * int(np.prod(shape, dtype=np.int64))


def save_checkpoint(store: dict[str, np.ndarray], path: str | Path) -> int:
    """Write ``store`` in insertion order; returns bytes written."""
    chunks = [MAGIC, struct.pack("<IQ", VERSION, len(store))]
    for name, arr in store.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"parameter path too long: {name[:40]}...")
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    blob = b"".join(chunks)
    Path(path).write_bytes(blob)
    return len(blob)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if len(blob) < HEADER_SIZE:
        raise CheckpointError(f"header truncated: {len(blob)} of {HEADER_SIZE} bytes at offset 0")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r} at offset 0, expected {MAGIC!r}")
    version, count = struct.unpack_from("<IQ", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} at offset 4")
    off = HEADER_SIZE
    store: dict[str, np.ndarray] = {}

    def need(n: int, what: str):
        if off + n > len(blob):
            raise CheckpointError(
                f"truncated {what} at offset {off}: need {n} bytes, {len(blob) - off} left"
            )

    for _ in range(count):
        need(2, "path length")
        (plen,) = struct.unpack_from("<H", blob, off)
        off += 2
        need(plen + 1, "path")
        try:
            name = blob[off:off + plen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"invalid utf-8 path at offset {off}") from exc
        off += plen
        rank = blob[off]
        off += 1
        need(4 * rank, "extents")
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = int(np.prod(shape, dtype=np.int64))
        need(4 * n, f"data of {name}")
        if name in store:
            raise CheckpointError(f"duplicate path {name!r} at offset {off}")
        store[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += 4 * n
    if off != len(blob):
        raise CheckpointError(f"{len(blob) - off} trailing bytes after offset {off}")
    return store

"""Flat binary parameter container.

Layout (little endian): magic ``b"EDCK"``, u32 version, u32 count, then per
entry u32 name length, utf-8 name, u32 rank, u64 dims, f64 payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"EDCK"
VERSION = 1


def save_checkpoint(path, state: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    state = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        state[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(dims).copy()
        pos += 8 * size
    if pos != len(blob):
        raise ValueError(f"{path}: {len(blob) - pos} trailing bytes")
    return state

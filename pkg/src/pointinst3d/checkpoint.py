"""Flat binary checkpoint format for named parameter tensors.

Layout (all little-endian):
  magic    8 bytes  b"PI3DCKPT"
  version  u32
  count    u32
  then per tensor, in sorted-name order:
    name_len u32, name utf-8, rank u32, dims u32 each, values f64

Write -> read -> write is byte-identical.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor

MAGIC = b"PI3DCKPT"
VERSION = 1

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError"]


class CheckpointError(Exception):
    pass


def save_checkpoint(path: str | Path, params: dict[str, Tensor]) -> None:
    names = sorted(params)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(names))]
    for name in names:
        values = np.asarray(params[name].values, dtype="<f8")
        if values.ndim and not values.flags.c_contiguous:
            values = np.ascontiguousarray(values)  # 0-d would be promoted to 1-d
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", values.ndim))
        chunks.append(struct.pack(f"<{values.ndim}I", *values.shape))
        chunks.append(values.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path, requires_grad: bool = True) -> dict[str, Tensor]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:8]!r}")
    version, count = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    offset = 16
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        name = data[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", data, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", data, offset)
        offset += 4 * rank
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        values = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(dims)
        offset += 8 * n
        params[name] = Tensor(values.copy(), requires_grad=requires_grad)
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return params

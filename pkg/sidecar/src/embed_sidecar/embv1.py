"""EMBV1 writer.

The format is the contract with the retrieval engine: little-endian
magic ``45 4D 42 56 31 00``, u32 dim, u64 count, then per record
``[u16 id byte length, id UTF-8, dim x f32]``. This module implements it
independently; the engine's loader is the other side of the contract.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"EMBV1\x00"
_HEADER = struct.Struct("<6sIQ")


class Embv1WriteError(ValueError):
    pass


def write_embv1(path: str | Path, ids: Sequence[str], vectors: np.ndarray) -> None:
    vec = np.ascontiguousarray(vectors, dtype="<f4")
    if vec.ndim != 2 or vec.shape[1] == 0:
        raise Embv1WriteError(f"expected non-empty 2-D vectors, got shape {vec.shape}")
    if len(ids) != vec.shape[0]:
        raise Embv1WriteError(f"{len(ids)} ids but {vec.shape[0]} vector rows")
    seen: set[str] = set()
    chunks = [_HEADER.pack(MAGIC, vec.shape[1], vec.shape[0])]
    for row, image_id in enumerate(ids):
        if not image_id or any(ord(c) < 32 or ord(c) == 127 for c in image_id):
            raise Embv1WriteError(f"invalid image id {image_id!r}")
        if image_id in seen:
            raise Embv1WriteError(f"duplicate image id {image_id!r}")
        seen.add(image_id)
        raw = image_id.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise Embv1WriteError(f"image id longer than 65535 bytes: {image_id[:32]!r}...")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(vec[row].tobytes())
    Path(path).write_bytes(b"".join(chunks))

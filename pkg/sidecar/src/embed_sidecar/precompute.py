"""Batch gallery precompute: image manifest in, EMBV1 file out.

The manifest is JSONL with ``image_id`` and ``path`` per line. Decode
failures are listed and abort the run unless skipping is requested.
Vectors are unit-normalized before writing; the engine's loader
re-verifies normalization on its side.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from .embv1 import write_embv1
from .encoders import Encoder, ItemDecodeError

log = logging.getLogger(__name__)

BATCH = 64


class ManifestError(ValueError):
    pass


class DecodeFailures(RuntimeError):
    def __init__(self, failures: list[tuple[str, str]]):
        listing = "; ".join(f"{image_id}: {reason}" for image_id, reason in failures[:10])
        super().__init__(f"{len(failures)} image(s) failed to decode: {listing}")
        self.failures = failures


def read_manifest(path: str | Path) -> list[tuple[str, str]]:
    entries: list[tuple[str, str]] = []
    seen: set[str] = set()
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
        image_id = str(obj.get("image_id") or "")
        img_path = str(obj.get("path") or "")
        if not image_id or not img_path:
            raise ManifestError(f"{path}:{line_no}: needs image_id and path")
        if image_id in seen:
            raise ManifestError(f"{path}:{line_no}: duplicate image id {image_id!r}")
        seen.add(image_id)
        entries.append((image_id, img_path))
    if not entries:
        raise ManifestError(f"{path}: empty manifest")
    return entries


def batch_precompute(
    manifest_path: str | Path,
    encoder: Encoder,
    out_path: str | Path,
    *,
    skip_bad: bool = False,
) -> list[str]:
    """Encode every manifest image into one EMBV1 file; returns the ids written."""
    entries = read_manifest(manifest_path)
    ids: list[str] = []
    rows: list[np.ndarray] = []
    failures: list[tuple[str, str]] = []
    for start in range(0, len(entries), BATCH):
        chunk = entries[start : start + BATCH]
        for image_id, img_path in chunk:
            try:
                rows.append(encoder.encode_image([img_path])[0])
                ids.append(image_id)
            except ItemDecodeError as exc:
                failures.append((image_id, str(exc)))
                log.warning("skipping %s: %s", image_id, exc)
    if failures and not skip_bad:
        raise DecodeFailures(failures)
    if not ids:
        raise DecodeFailures(failures)
    write_embv1(out_path, ids, np.stack(rows))
    return ids

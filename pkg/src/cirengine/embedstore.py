"""Gallery embedding store: EMBV1 file I/O and exact top-K cosine ranking.

EMBV1 layout (little-endian): magic ``45 4D 42 56 31 00`` ("EMBV1\\0"),
u32 dim, u64 count, then ``count`` records of
``[u16 id_byte_length, id UTF-8 bytes, dim x f32 components]``.
Writers may store unnormalized vectors; the loader normalizes every row.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .domain import RankedList, View, require_image_id

log = logging.getLogger(__name__)

MAGIC = b"EMBV1\x00"
_HEADER = struct.Struct("<6sIQ")

# Rows already this close to unit norm are left untouched so that a
# load -> write -> load cycle is bit-stable.
_NORM_SKIP_TOL = 1e-6
_ZERO_NORM_TOL = 1e-12


class Embv1Error(Exception):
    """Base error for EMBV1 parsing and store operations."""


class BadMagic(Embv1Error):
    pass


class TruncatedFile(Embv1Error):
    pass


class DuplicateId(Embv1Error):
    pass


class ZeroDim(Embv1Error):
    pass


class DimMismatch(Embv1Error):
    pass


class UnknownImageId(Embv1Error, KeyError):
    pass


@dataclass(eq=False)
class EmbeddingMatrix:
    """Unit-normalized gallery embeddings; immutable after construction."""

    dim: int
    ids: tuple[str, ...]
    vectors: np.ndarray  # float32, shape (len(ids), dim), rows unit-norm
    _row_of: dict = field(init=False, repr=False, compare=False)
    _id_array: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.dim <= 0:
            raise ZeroDim(f"dim must be positive, got {self.dim}")
        if self.vectors.shape != (len(self.ids), self.dim):
            raise Embv1Error(
                f"vector shape {self.vectors.shape} does not match "
                f"{len(self.ids)} ids x dim {self.dim}"
            )
        self._row_of = {}
        for row, image_id in enumerate(self.ids):
            require_image_id(image_id)
            if image_id in self._row_of:
                raise DuplicateId(f"duplicate image id {image_id!r}")
            self._row_of[image_id] = row
        self._id_array = np.array(self.ids, dtype=np.str_)
        self.vectors.setflags(write=False)

    @classmethod
    def from_arrays(
        cls, ids: Sequence[str], vectors: np.ndarray, normalize: bool = True
    ) -> "EmbeddingMatrix":
        vec = np.ascontiguousarray(vectors, dtype=np.float32)
        if vec.ndim != 2:
            raise Embv1Error(f"expected 2-D vectors, got shape {vec.shape}")
        if normalize:
            vec = _normalize_rows(vec, list(ids))
        return cls(dim=vec.shape[1], ids=tuple(ids), vectors=vec)

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._row_of

    def row(self, image_id: str) -> np.ndarray:
        try:
            return self.vectors[self._row_of[image_id]]
        except KeyError:
            raise UnknownImageId(f"image id {image_id!r} not in store") from None


def _normalize_rows(vec: np.ndarray, ids: Sequence[str]) -> np.ndarray:
    """Unit-normalize rows in place semantics; zero rows become e1."""
    out = np.array(vec, dtype=np.float32, copy=True)
    norms = np.linalg.norm(out.astype(np.float64), axis=1)
    for i in np.flatnonzero(norms < _ZERO_NORM_TOL):
        log.warning("zero-norm embedding for %r replaced by unit basis vector", ids[i])
        out[i, :] = 0.0
        out[i, 0] = 1.0
        norms[i] = 1.0
    needs = np.abs(norms - 1.0) > _NORM_SKIP_TOL
    if needs.any():
        scaled = out[needs].astype(np.float64) / norms[needs, None]
        out[needs] = scaled.astype(np.float32)
    return out


def load_embv1(path: str | Path) -> EmbeddingMatrix:
    """Load an EMBV1 file, normalizing rows. Errors carry byte offsets."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise TruncatedFile(f"{path}: file shorter than header (byte 0)")
    magic, dim, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r} at byte 0")
    if dim == 0:
        raise ZeroDim(f"{path}: dim=0 at byte 6")
    offset = _HEADER.size
    ids: list[str] = []
    seen: set[str] = set()
    rows = np.empty((count, dim), dtype=np.float32)
    vec_bytes = 4 * dim
    for i in range(count):
        if offset + 2 > len(data):
            raise TruncatedFile(f"{path}: record {i} id length missing at byte {offset}")
        (id_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        if offset + id_len + vec_bytes > len(data):
            raise TruncatedFile(f"{path}: record {i} truncated at byte {offset}")
        try:
            image_id = data[offset : offset + id_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise Embv1Error(f"{path}: record {i} id is not UTF-8 at byte {offset}") from exc
        offset += id_len
        if image_id in seen:
            raise DuplicateId(f"{path}: duplicate image id {image_id!r}")
        seen.add(image_id)
        ids.append(image_id)
        rows[i] = np.frombuffer(data, dtype="<f4", count=dim, offset=offset)
        offset += vec_bytes
    if offset != len(data):
        raise TruncatedFile(
            f"{path}: {len(data) - offset} unexpected trailing bytes at byte {offset}"
        )
    return EmbeddingMatrix(dim=dim, ids=tuple(ids), vectors=_normalize_rows(rows, ids))


def write_embv1(path: str | Path, ids: Sequence[str], vectors: np.ndarray) -> None:
    """Write an EMBV1 file. Vectors are stored as given (f32), unnormalized ok."""
    vec = np.ascontiguousarray(vectors, dtype=np.float32)
    if vec.ndim != 2:
        raise Embv1Error(f"expected 2-D vectors, got shape {vec.shape}")
    n, dim = vec.shape
    if dim == 0:
        raise ZeroDim("cannot write dim=0 embeddings")
    if len(ids) != n:
        raise Embv1Error(f"{len(ids)} ids but {n} vector rows")
    seen: set[str] = set()
    chunks = [_HEADER.pack(MAGIC, dim, n)]
    for i, image_id in enumerate(ids):
        require_image_id(image_id)
        if image_id in seen:
            raise DuplicateId(f"duplicate image id {image_id!r}")
        seen.add(image_id)
        raw = image_id.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise Embv1Error(f"image id too long ({len(raw)} bytes): {image_id[:32]!r}...")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(vec[i].tobytes())
    Path(path).write_bytes(b"".join(chunks))


def _prepare_query(store: EmbeddingMatrix, query: np.ndarray) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != store.dim:
        raise DimMismatch(f"query dim {q.shape[0]} != store dim {store.dim}")
    norm = float(np.linalg.norm(q))
    if norm < _ZERO_NORM_TOL:
        log.warning("zero-norm query vector replaced by unit basis vector")
        q = np.zeros(store.dim, dtype=np.float64)
        q[0] = 1.0
    elif abs(norm - 1.0) > _NORM_SKIP_TOL:
        q = q / norm
    return q


def rank_by_vector(
    store: EmbeddingMatrix,
    query: np.ndarray,
    top_n: int,
    *,
    view: View = "pred",
    produced_for: str = "",
) -> RankedList:
    """Exact top-``top_n`` gallery ranking by cosine similarity to ``query``.

    Rows are pre-normalized, so similarity is a dot product; ties are
    broken by ascending id. The output is always a prefix of the full
    sorted ranking.
    """
    if top_n < 1:
        raise ValueError(f"top_n must be >= 1, got {top_n}")
    q = _prepare_query(store, query)
    scores = store.vectors @ q
    n = len(store)
    m = min(top_n, n)
    if m == n:
        cand = np.arange(n)
    else:
        # Partial selection; pull in every score tied with the cutoff so the
        # id tie-break stays exact across the partition boundary.
        part = np.argpartition(-scores, m - 1)[:m]
        cutoff = scores[part].min()
        cand = np.flatnonzero(scores >= cutoff)
    order = cand[np.lexsort((store._id_array[cand], -scores[cand]))][:m]
    entries = tuple((store.ids[i], float(scores[i])) for i in order)
    return RankedList(view=view, entries=entries, produced_for=produced_for)


def rank_by_image(
    store: EmbeddingMatrix,
    ref: str,
    top_n: int,
    *,
    produced_for: str = "",
) -> RankedList:
    """Rank the gallery by similarity to a stored image's own embedding.

    The reference row itself stays in the result; downstream deliberation
    decides its relevance.
    """
    return rank_by_vector(
        store, store.row(ref), top_n, view="vis", produced_for=produced_for
    )

"""Dataset adapters: normalized triplet records plus a gallery manifest.

Supported annotation layouts:

- ``generic_jsonl``: one JSON object per line with keys query_id, ref,
  mod, targets, optional subset and split.
- ``cirr``: list of records with pairid / reference / target_hard /
  caption / img_set.members (six-image subsets, single target).
- ``circo``: list of records with reference_img_id / relative_caption /
  gt_img_ids (multiple targets).
- ``fashioniq``: list of records with candidate / target / captions; the
  two captions are joined with " and " into one modification text.
- ``synthetic``: a directory written by the synthetic generator.

The gallery manifest is an explicit file when given (JSON list, JSONL
with an ``id`` field, or one id per line); otherwise it is derived from
every id the annotations reference.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal, Optional, Sequence

from .domain import ComposedQuery, DomainError, SemanticProxy, require_image_id

log = logging.getLogger(__name__)

DatasetKind = Literal["cirr", "circo", "fashioniq", "generic_jsonl", "synthetic"]
Split = Literal["train", "val", "test"]

MULTI_GT_KINDS = {"circo"}


class SchemaError(ValueError):
    """An annotation file does not match its adapter's schema."""


class MissingGalleryEntry(ValueError):
    """A triplet references an id absent from the gallery manifest."""


@dataclass(frozen=True)
class TripletRecord:
    query_id: str
    ref_image: str
    mod_text: str
    targets: frozenset[str]
    subset: Optional[tuple[str, ...]] = None
    split: Split = "val"

    def __post_init__(self) -> None:
        require_image_id(self.ref_image)
        if not self.mod_text:
            raise SchemaError(f"record {self.query_id!r}: empty modification text")
        object.__setattr__(self, "targets", frozenset(self.targets))
        if self.split in ("train", "val") and not self.targets:
            raise SchemaError(f"record {self.query_id!r}: labeled split without targets")
        for t in self.targets:
            require_image_id(t)
        if self.subset is not None:
            subset = tuple(self.subset)
            if len(subset) != 6:
                raise SchemaError(
                    f"record {self.query_id!r}: subset must have 6 members, got {len(subset)}"
                )
            stray = sorted(t for t in self.targets if t not in subset)
            if stray:
                raise SchemaError(f"record {self.query_id!r}: targets {stray} not in subset")
            object.__setattr__(self, "subset", subset)

    def to_query(self) -> ComposedQuery:
        return ComposedQuery(
            query_id=self.query_id,
            ref_image=self.ref_image,
            mod_text=self.mod_text,
            ground_truth=self.targets,
            subset=self.subset,
        )


@dataclass
class DatasetBundle:
    kind: DatasetKind
    records: list[TripletRecord]
    gallery: tuple[str, ...]
    multi_gt: bool
    extras: dict[str, Any] = field(default_factory=dict)

    def referenced_ids(self) -> set[str]:
        out: set[str] = set()
        for r in self.records:
            out.add(r.ref_image)
            out.update(r.targets)
            if r.subset:
                out.update(r.subset)
        return out


def _read_gallery_file(path: Path) -> list[str]:
    text = path.read_text(encoding="utf-8").strip()
    if not text:
        raise SchemaError(f"{path}: empty gallery manifest")
    if text[0] == "[":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON gallery manifest: {exc}") from exc
        if not isinstance(data, list):
            raise SchemaError(f"{path}: gallery manifest must be a list")
        return [str(v) for v in data]
    ids: list[str] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line[0] == "{":
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
            value = obj.get("id") or obj.get("image_id")
            if not value:
                raise SchemaError(f"{path}:{line_no}: gallery entry without id")
            ids.append(str(value))
        else:
            ids.append(line)
    return ids


def _validate_gallery(records: Sequence[TripletRecord], gallery: Sequence[str], origin: str) -> tuple[str, ...]:
    seen: set[str] = set()
    out: list[str] = []
    for g in gallery:
        require_image_id(g)
        if g in seen:
            raise SchemaError(f"{origin}: duplicate gallery id {g!r}")
        seen.add(g)
        out.append(g)
    for r in records:
        missing = sorted(
            i for i in {r.ref_image, *r.targets, *(r.subset or ())} if i not in seen
        )
        if missing:
            raise MissingGalleryEntry(
                f"{origin}: record {r.query_id!r} references ids missing from the gallery: {missing[:5]}"
            )
    return tuple(out)


def _load_json_records(path: Path) -> list[dict]:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON: {exc}") from exc
    if isinstance(data, dict):
        data = list(data.values())
    if not isinstance(data, list):
        raise SchemaError(f"{path}: expected a list of records")
    return data


def _require(obj: dict, key: str, origin: str) -> Any:
    if key not in obj or obj[key] in (None, ""):
        raise SchemaError(f"{origin}: missing field {key!r}")
    return obj[key]


def _parse_generic_jsonl(path: Path) -> list[TripletRecord]:
    records: list[TripletRecord] = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        origin = f"{path}:{line_no}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{origin}: invalid JSON: {exc}") from exc
        targets = _require(obj, "targets", origin)
        if not isinstance(targets, list) or not targets:
            raise SchemaError(f"{origin}: targets must be a non-empty list")
        subset = obj.get("subset")
        try:
            records.append(
                TripletRecord(
                    query_id=str(_require(obj, "query_id", origin)),
                    ref_image=str(_require(obj, "ref", origin)),
                    mod_text=str(_require(obj, "mod", origin)),
                    targets=frozenset(str(t) for t in targets),
                    subset=tuple(str(s) for s in subset) if subset else None,
                    split=obj.get("split", "val"),
                )
            )
        except (SchemaError, DomainError) as exc:
            raise SchemaError(f"{origin}: {exc}") from exc
    return records


def _parse_cirr(path: Path) -> list[TripletRecord]:
    records = []
    for i, obj in enumerate(_load_json_records(path)):
        origin = f"{path}[{i}]"
        img_set = obj.get("img_set") or {}
        members = img_set.get("members") if isinstance(img_set, dict) else None
        try:
            records.append(
                TripletRecord(
                    query_id=str(obj.get("pairid", i)),
                    ref_image=str(_require(obj, "reference", origin)),
                    mod_text=str(_require(obj, "caption", origin)),
                    targets=frozenset({str(_require(obj, "target_hard", origin))}),
                    subset=tuple(str(m) for m in members) if members else None,
                    split=obj.get("split", "val"),
                )
            )
        except (SchemaError, DomainError) as exc:
            raise SchemaError(f"{origin}: {exc}") from exc
    return records


def _parse_circo(path: Path) -> list[TripletRecord]:
    records = []
    for i, obj in enumerate(_load_json_records(path)):
        origin = f"{path}[{i}]"
        gts = obj.get("gt_img_ids")
        if not isinstance(gts, list) or not gts:
            raise SchemaError(f"{origin}: gt_img_ids must be a non-empty list")
        try:
            records.append(
                TripletRecord(
                    query_id=str(obj.get("id", i)),
                    ref_image=str(_require(obj, "reference_img_id", origin)),
                    mod_text=str(_require(obj, "relative_caption", origin)),
                    targets=frozenset(str(t) for t in gts),
                    split=obj.get("split", "val"),
                )
            )
        except (SchemaError, DomainError) as exc:
            raise SchemaError(f"{origin}: {exc}") from exc
    return records


def _parse_fashioniq(path: Path) -> list[TripletRecord]:
    records = []
    for i, obj in enumerate(_load_json_records(path)):
        origin = f"{path}[{i}]"
        captions = obj.get("captions")
        if not isinstance(captions, list) or not captions:
            raise SchemaError(f"{origin}: captions must be a non-empty list")
        mod = " and ".join(str(c).strip() for c in captions if str(c).strip())
        try:
            records.append(
                TripletRecord(
                    query_id=str(obj.get("pairid", f"{path.stem}-{i}")),
                    ref_image=str(_require(obj, "candidate", origin)),
                    mod_text=mod,
                    targets=frozenset({str(_require(obj, "target", origin))}),
                    split=obj.get("split", "val"),
                )
            )
        except (SchemaError, DomainError) as exc:
            raise SchemaError(f"{origin}: {exc}") from exc
    return records


def load_dataset(
    kind: DatasetKind,
    annotation_path: str | Path,
    gallery_path: Optional[str | Path] = None,
    image_root: Optional[str | Path] = None,
) -> DatasetBundle:
    """Load and validate one dataset into normalized records + manifest."""
    path = Path(annotation_path)
    if not path.exists():
        raise SchemaError(f"annotation path does not exist: {path}")
    if kind == "synthetic":
        from .synthetic import load_synthetic_dir

        return load_synthetic_dir(path).bundle
    if kind == "generic_jsonl":
        records = _parse_generic_jsonl(path)
    elif kind == "cirr":
        records = _parse_cirr(path)
    elif kind == "circo":
        records = _parse_circo(path)
    elif kind == "fashioniq":
        records = _parse_fashioniq(path)
    else:
        raise SchemaError(f"unknown dataset kind {kind!r}")

    ids = sorted({qid for r in records for qid in [r.query_id]})
    if len(ids) != len(records):
        raise SchemaError(f"{path}: duplicate query ids")

    if gallery_path is not None:
        gallery = _validate_gallery(records, _read_gallery_file(Path(gallery_path)), str(gallery_path))
    else:
        derived: set[str] = set()
        for r in records:
            derived.add(r.ref_image)
            derived.update(r.targets)
            derived.update(r.subset or ())
        gallery = tuple(sorted(derived))
    extras: dict[str, Any] = {}
    if image_root is not None:
        extras["image_root"] = str(image_root)
    return DatasetBundle(
        kind=kind,
        records=records,
        gallery=gallery,
        multi_gt=kind in MULTI_GT_KINDS,
        extras=extras,
    )


def load_proxies(path: str | Path, max_chars: int = 2048) -> dict[str, SemanticProxy]:
    """Load a JSONL proxy store: {"image_id", "text", "source"?} per line."""
    path = Path(path)
    proxies: dict[str, SemanticProxy] = {}
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        origin = f"{path}:{line_no}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{origin}: invalid JSON: {exc}") from exc
        image_id = str(_require(obj, "image_id", origin))
        text = str(_require(obj, "text", origin))
        if len(text) > max_chars:
            raise SchemaError(f"{origin}: proxy text exceeds {max_chars} characters")
        if image_id in proxies:
            raise SchemaError(f"{origin}: duplicate proxy for {image_id!r}")
        source = obj.get("source", "precomputed")
        if source not in ("precomputed", "generated"):
            raise SchemaError(f"{origin}: bad source {source!r}")
        try:
            proxies[image_id] = SemanticProxy(image=image_id, text=text, source=source)
        except DomainError as exc:
            raise SchemaError(f"{origin}: {exc}") from exc
    return proxies


def save_proxies(path: str | Path, proxies: dict[str, SemanticProxy]) -> None:
    lines = [
        json.dumps(
            {"image_id": p.image, "text": p.text, "source": p.source}, sort_keys=True
        )
        for p in proxies.values()
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

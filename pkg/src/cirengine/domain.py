"""Shared domain types for the retrieval engine.

Images exist only as opaque string ids paired with embeddings and text
proxies; pixels never enter this package. All types here are immutable
after construction and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Literal, Optional

View = Literal["pred", "key", "vis", "fused"]
ProxySource = Literal["precomputed", "generated"]

VIEWS: tuple[str, ...] = ("pred", "key", "vis", "fused")

#: Default cap on proxy text length (characters).
DEFAULT_PROXY_MAX_CHARS = 2048


class DomainError(ValueError):
    """A domain value violates its invariants."""


def require_image_id(value: str) -> str:
    """Validate an image id: non-empty string without control characters."""
    if not isinstance(value, str) or not value:
        raise DomainError("image id must be a non-empty string")
    if any(ord(c) < 32 or ord(c) == 127 for c in value):
        raise DomainError(f"image id contains control characters: {value!r}")
    return value


@dataclass(frozen=True)
class ComposedQuery:
    """A composed query: reference image plus a textual modification.

    ``ground_truth`` may be empty at inference time. ``subset`` is the
    optional 6-image candidate subset used by subset-retrieval protocols;
    when present, every ground-truth id must be one of its members.
    """

    query_id: str
    ref_image: str
    mod_text: str
    ground_truth: frozenset[str] = frozenset()
    subset: Optional[tuple[str, ...]] = None

    def __post_init__(self) -> None:
        require_image_id(self.ref_image)
        if not self.mod_text:
            raise DomainError(f"query {self.query_id!r}: modification text is empty")
        object.__setattr__(self, "ground_truth", frozenset(self.ground_truth))
        for gt in self.ground_truth:
            require_image_id(gt)
        if self.subset is not None:
            subset = tuple(self.subset)
            if len(subset) != 6:
                raise DomainError(
                    f"query {self.query_id!r}: subset must have exactly 6 members, got {len(subset)}"
                )
            missing = sorted(t for t in self.ground_truth if t not in subset)
            if missing:
                raise DomainError(
                    f"query {self.query_id!r}: ground truth {missing} not in subset"
                )
            object.__setattr__(self, "subset", subset)


@dataclass(frozen=True)
class SemanticProxy:
    """Dense natural-language transcription standing in for an image.

    Length limits are enforced where proxies enter the system (ingestion
    and generation), against the configured cap.
    """

    image: str
    text: str
    source: ProxySource = "precomputed"

    def __post_init__(self) -> None:
        require_image_id(self.image)
        if not self.text:
            raise DomainError(f"proxy for {self.image!r}: empty text")


@dataclass(frozen=True)
class RankedList:
    """An ordered list of (image id, score) with deterministic ordering.

    Scores are non-increasing; equal scores are broken by ascending id.
    """

    view: View
    entries: tuple[tuple[str, float], ...]
    produced_for: str = ""
    _ranks: dict = field(init=False, repr=False, compare=False, hash=False, default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        entries = tuple((str(i), float(s)) for i, s in self.entries)
        object.__setattr__(self, "entries", entries)
        if self.view not in VIEWS:
            raise DomainError(f"unknown ranked-list view {self.view!r}")
        ranks: dict[str, int] = {}
        prev: Optional[tuple[str, float]] = None
        for pos, (image_id, score) in enumerate(entries, start=1):
            require_image_id(image_id)
            if image_id in ranks:
                raise DomainError(f"duplicate id in ranked list: {image_id!r}")
            if prev is not None:
                prev_id, prev_score = prev
                if score > prev_score:
                    raise DomainError(
                        f"scores must be non-increasing: {prev_score} then {score}"
                    )
                if score == prev_score and image_id < prev_id:
                    raise DomainError(
                        f"tied scores must be ordered by ascending id: {prev_id!r} then {image_id!r}"
                    )
            ranks[image_id] = pos
            prev = (image_id, score)
        object.__setattr__(self, "_ranks", ranks)

    @classmethod
    def from_pairs(
        cls,
        view: View,
        pairs: Iterable[tuple[str, float]],
        produced_for: str = "",
    ) -> "RankedList":
        """Build a RankedList from unsorted pairs (score desc, id asc)."""
        ordered = sorted(pairs, key=lambda p: (-float(p[1]), str(p[0])))
        return cls(view=view, entries=tuple(ordered), produced_for=produced_for)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(i for i, _ in self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._ranks


def rank_of(ranked: RankedList, image_id: str) -> Optional[int]:
    """1-based rank of ``image_id`` in the list, or None when absent."""
    return ranked._ranks.get(image_id)

"""Retrieval metrics: recall@K, subset-restricted recall@K, truncated mAP@K.

All functions are pure; rankings may be RankedList instances or plain id
sequences.
"""

from __future__ import annotations

from typing import Iterable, Sequence

from .domain import RankedList

RECALL_KS = (1, 5, 10, 50)
RECALL_SUBSET_KS = (1, 2, 3)
MAP_KS = (5, 10, 25, 50)


class SubsetMissing(ValueError):
    """Subset-restricted recall was requested without a valid subset."""


def _ids(ranking: RankedList | Sequence[str]) -> tuple[str, ...]:
    if isinstance(ranking, RankedList):
        return ranking.ids
    return tuple(ranking)


def recall_at_k(ranking: RankedList | Sequence[str], targets: Iterable[str], k: int) -> int:
    """1 iff any target appears within the first k entries."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    targets = set(targets)
    head = _ids(ranking)[:k]
    return int(any(i in targets for i in head))


def recall_subset_at_k(
    ranking: RankedList | Sequence[str],
    targets: Iterable[str],
    subset: Sequence[str],
    k: int,
) -> int:
    """Recall after restricting the ranking to the 6-image subset.

    Subset members absent from the ranking are appended in subset order,
    so the restricted list always has all six members.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not subset or len(subset) != 6:
        raise SubsetMissing(f"subset must have exactly 6 members, got {subset!r}")
    members = set(subset)
    ranked = _ids(ranking)
    restricted = [i for i in ranked if i in members]
    present = set(restricted)
    restricted += [m for m in subset if m not in present]
    targets = set(targets)
    return int(any(i in targets for i in restricted[:k]))


def map_at_k(ranking: RankedList | Sequence[str], targets: Iterable[str], k: int) -> float:
    """Truncated average precision with denominator min(|targets|, k)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    targets = set(targets)
    if not targets:
        raise ValueError("targets must be non-empty")
    head = _ids(ranking)[:k]
    hits = 0
    precision_sum = 0.0
    for position, image_id in enumerate(head, start=1):
        if image_id in targets:
            hits += 1
            precision_sum += hits / position
    return precision_sum / min(len(targets), k)


def mean(values: Sequence[float]) -> float:
    return sum(values) / len(values) if values else 0.0

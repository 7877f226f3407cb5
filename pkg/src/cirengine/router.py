"""Per-query intent weighting and weighted reciprocal-rank fusion.

The fused score of an image is sum_m w_m / (r_m + tau) over the three
branch ranks r_m, with tau smoothing the head of each list so that
cross-branch consensus can beat a single top rank. Items missing from a
branch's retrieved list take rank depth+1 (bounded pessimism), keeping
scores finite and order complete.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Literal, Mapping, Optional

from . import prompts
from .domain import RankedList, rank_of
from .gateway import LlmGateway, LlmRequest, MalformedStructuredReply, structured_call

log = logging.getLogger(__name__)

BRANCHES: tuple[str, ...] = ("pred", "key", "vis")
FusionMode = Literal["ipr", "static", "avg"]

DEFAULT_TAU = 60.0
DEFAULT_BUFFER_K = 50

_WEIGHT_SUM_TOL = 1e-6


class AllBranchesEmpty(RuntimeError):
    """Every branch produced an empty ranking; the query cannot proceed."""


@dataclass(frozen=True)
class IntentWeights:
    """Normalized three-way weights over the perception branches."""

    w_pred: float
    w_key: float
    w_vis: float

    def __post_init__(self) -> None:
        for name, value in self.as_mapping().items():
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"weight {name} must be finite and >= 0, got {value}")
        total = self.w_pred + self.w_key + self.w_vis
        if abs(total - 1.0) > _WEIGHT_SUM_TOL:
            raise ValueError(f"weights must sum to 1 +- {_WEIGHT_SUM_TOL}, got {total}")

    def as_mapping(self) -> dict[str, float]:
        return {"pred": self.w_pred, "key": self.w_key, "vis": self.w_vis}

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.w_pred, self.w_key, self.w_vis)

    @classmethod
    def uniform(cls) -> "IntentWeights":
        return cls(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)

    @classmethod
    def from_raw(cls, raw: tuple[float, float, float]) -> "IntentWeights":
        """Clamp negatives to zero and renormalize; all-zero falls back to uniform."""
        clamped = [v if math.isfinite(v) and v > 0 else 0.0 for v in raw]
        total = sum(clamped)
        if total <= 0:
            return cls.uniform()
        return cls(*(v / total for v in clamped))


@dataclass(frozen=True)
class FusionConfig:
    """Fusion parameters; ``static_weights`` only applies in static mode.

    Missing-rank policy is fixed: an item absent from a branch's list is
    treated as ranked one past that branch's depth.
    """

    tau: float = DEFAULT_TAU
    k: int = DEFAULT_BUFFER_K
    mode: FusionMode = "ipr"
    static_weights: IntentWeights = field(default_factory=IntentWeights.uniform)

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.k < 2:
            raise ValueError(f"k must be >= 2, got {self.k}")
        if self.mode not in ("ipr", "static", "avg"):
            raise ValueError(f"unknown fusion mode {self.mode!r}")


@dataclass(frozen=True)
class CandidateBuffer:
    """Top-k fused candidates, sorted by score desc then id asc."""

    query_id: str
    entries: tuple[tuple[str, float], ...]
    weights_used: IntentWeights

    def __post_init__(self) -> None:
        seen: set[str] = set()
        prev: Optional[tuple[str, float]] = None
        for image_id, score in self.entries:
            if image_id in seen:
                raise ValueError(f"duplicate id in buffer: {image_id!r}")
            seen.add(image_id)
            if prev is not None:
                prev_id, prev_score = prev
                if score > prev_score or (score == prev_score and image_id < prev_id):
                    raise ValueError("buffer entries out of order")
            prev = (image_id, score)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(i for i, _ in self.entries)

    def __len__(self) -> int:
        return len(self.entries)


def route_intent(
    mod_text: str,
    gateway: LlmGateway,
    *,
    template_dir: Optional[str] = None,
) -> IntentWeights:
    """Ask the router LLM for per-branch weights.

    Negative components are clamped and the vector renormalized; an
    unusable reply after one re-prompt falls back to uniform weights.
    Provider failures are absorbed the same way (logged, never raised).
    """
    if not mod_text:
        raise ValueError("mod_text must be non-empty")
    prompt = prompts.render(
        prompts.load_template("ir_router", template_dir), mod_text=mod_text
    )
    request = LlmRequest(role="ir_router", prompt=prompt, structured=True)
    try:
        raw, _ = structured_call(gateway, request, "weights")
    except MalformedStructuredReply:
        log.warning("intent routing reply unusable twice; falling back to uniform")
        gateway.bump("router_fallbacks")
        return IntentWeights.uniform()
    except Exception as exc:  # provider exhaustion etc.
        log.warning("intent routing failed (%s); falling back to uniform", exc)
        gateway.bump("router_fallbacks")
        return IntentWeights.uniform()
    return IntentWeights.from_raw(raw)


def weights_for_mode(
    cfg: FusionConfig,
    mod_text: str,
    gateway: Optional[LlmGateway],
    *,
    template_dir: Optional[str] = None,
) -> IntentWeights:
    """Resolve the weight vector for the configured fusion mode."""
    if cfg.mode == "avg":
        return IntentWeights.uniform()
    if cfg.mode == "static":
        return cfg.static_weights
    if gateway is None:
        raise ValueError("ipr mode requires a gateway")
    return route_intent(mod_text, gateway, template_dir=template_dir)


def fuse(
    ranks: Mapping[str, RankedList],
    weights: IntentWeights,
    cfg: FusionConfig,
    gallery: set[str],
) -> CandidateBuffer:
    """Weighted reciprocal-rank fusion over the branch rankings.

    Scores every id retrieved by at least one branch; ids retrieved by no
    branch are excluded (they are mutually indistinguishable anyway).
    """
    missing = [b for b in BRANCHES if b not in ranks]
    if missing:
        raise ValueError(f"missing branch rankings: {missing}")
    query_ids = {ranks[b].produced_for for b in BRANCHES if len(ranks[b])}
    if len(query_ids) > 1:
        raise ValueError(f"branch rankings belong to different queries: {sorted(query_ids)}")
    query_id = next(iter(query_ids), "")

    union: set[str] = set()
    for branch in BRANCHES:
        ranked = ranks[branch]
        if ranked.view != branch:
            raise ValueError(f"branch {branch!r} carries view {ranked.view!r}")
        foreign = [i for i in ranked.ids if i not in gallery]
        if foreign:
            raise ValueError(f"branch {branch!r} ranks ids outside the gallery: {foreign[:3]}")
        union.update(ranked.ids)
    if not union:
        raise AllBranchesEmpty(f"no branch retrieved anything for query {query_id!r}")

    w = weights.as_mapping()
    depth_plus_one = {b: len(ranks[b]) + 1 for b in BRANCHES}
    scored = []
    for image_id in union:
        score = 0.0
        for branch in BRANCHES:
            r = rank_of(ranks[branch], image_id)
            if r is None:
                r = depth_plus_one[branch]
            score += w[branch] / (r + cfg.tau)
        scored.append((image_id, score))
    scored.sort(key=lambda p: (-p[1], p[0]))
    return CandidateBuffer(
        query_id=query_id, entries=tuple(scored[: cfg.k]), weights_used=weights
    )


def split_pages(buffer: CandidateBuffer) -> tuple[list[str], list[str]]:
    """Split the buffer into two contiguous pages (first gets the ceiling)."""
    if not len(buffer):
        raise ValueError("cannot split an empty buffer")
    ids = list(buffer.ids)
    half = (len(ids) + 1) // 2
    return ids[:half], ids[half:]

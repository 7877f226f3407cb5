"""Tournament-style deliberation over the candidate buffer.

The buffer is cut into contiguous pages and screened page by page with
one LLM call each. Single-ground-truth tasks run a sequential staged
selection where each stage's winner is injected into the next page as
the leading candidate; multi-ground-truth tasks scan pages independently
and merge selections by union. Deliberation only ever reorders the
buffer: selected ids are promoted to a prefix and everything else keeps
its fused order.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Literal, Mapping, Optional, Sequence

from . import prompts
from .domain import ComposedQuery, RankedList
from .gateway import (
    LlmGateway,
    LlmRequest,
    MalformedStructuredReply,
    ProviderError,
    structured_call,
)
from .router import CandidateBuffer

log = logging.getLogger(__name__)

Strategy = Literal["sequential", "parallel"]
PickMode = Literal["pick_one", "pick_many"]

DEFAULT_STAGES = 2
DEFAULT_MAX_PAGE_ITEMS = 26  # 25 candidates + an injected leading candidate
EXPERIENCE_PROMPT_ITEMS = 8


@dataclass(frozen=True)
class PageDecision:
    """Outcome of screening one page.

    ``next_page`` is the sentinel meaning no correct answer exists among
    the shown candidates, so it holds exactly when nothing was selected.
    """

    page_index: int
    selected: tuple[str, ...]
    next_page: bool
    rationale: str
    tokens_out: int

    def __post_init__(self) -> None:
        if self.next_page != (len(self.selected) == 0):
            raise ValueError("next_page must hold exactly when nothing is selected")
        if self.tokens_out < 0:
            raise ValueError("tokens_out must be >= 0")


@dataclass(frozen=True)
class DeliberationResult:
    query_id: str
    final_ranking: RankedList
    selected: tuple[str, ...]
    strategy: Strategy
    stages_used: int
    total_tokens_out: int
    decisions: tuple[PageDecision, ...] = ()


def choose_strategy(multi_gt: Optional[bool]) -> Strategy:
    """Sequential for single-ground-truth task families, parallel for multi.

    The flag comes from the dataset adapter; None (unspecified) defaults
    to sequential.
    """
    return "parallel" if multi_gt else "sequential"


def _page_slices(ids: Sequence[str], stages: int) -> list[list[str]]:
    """Contiguous pages of size ceil(n / stages), in buffer order."""
    n = len(ids)
    size = math.ceil(n / stages)
    return [list(ids[i : i + size]) for i in range(0, n, size)]


def _experience_texts(experience) -> list[str]:
    if experience is None:
        return []
    top = getattr(experience, "top_texts", None)
    if callable(top):
        return list(top(EXPERIENCE_PROMPT_ITEMS))
    return [str(t) for t in experience][:EXPERIENCE_PROMPT_ITEMS]


def judge_page(
    query_text: str,
    page: Sequence[tuple[str, str]],
    leading: Optional[str],
    experience,
    mode: PickMode,
    gateway: LlmGateway,
    *,
    page_index: int = 0,
    max_page_items: int = DEFAULT_MAX_PAGE_ITEMS,
    template_dir: Optional[str] = None,
) -> PageDecision:
    """Screen one page of (id, proxy) candidates with a single LLM call.

    Ids outside the page are dropped with a warning; an unparseable reply
    after one re-prompt degrades to the next_page sentinel. pick_one
    keeps at most the first selected id.
    """
    if not page:
        raise ValueError("page must be non-empty")
    if len(page) > max_page_items:
        raise ValueError(f"page has {len(page)} items, limit is {max_page_items}")
    page_ids = [image_id for image_id, _ in page]
    if leading is not None and leading not in page_ids:
        raise ValueError(f"leading candidate {leading!r} is not on the page")

    prompt = prompts.render(
        prompts.load_template("de_judge", template_dir),
        query=query_text,
        candidates=prompts.format_candidates(page),
        leading=prompts.format_leading(leading),
        experience=prompts.format_experience(_experience_texts(experience)),
        mode=mode,
    )
    request = LlmRequest(role="de_judge", prompt=prompt, structured=True)
    try:
        decision, replies = structured_call(gateway, request, "page_decision")
    except MalformedStructuredReply as exc:
        tokens = sum(r.tokens_out for r in exc.replies)
        log.warning("page %d reply unparseable twice; treating as next_page", page_index)
        return PageDecision(
            page_index=page_index,
            selected=(),
            next_page=True,
            rationale="parse-failure",
            tokens_out=tokens,
        )
    tokens = sum(r.tokens_out for r in replies)

    on_page = set(page_ids)
    selected: list[str] = []
    for image_id in decision["selected"]:
        if image_id not in on_page:
            log.warning("page %d: dropping off-page id %r", page_index, image_id)
            continue
        if image_id not in selected:
            selected.append(image_id)
    if mode == "pick_one":
        selected = selected[:1]
    return PageDecision(
        page_index=page_index,
        selected=tuple(selected),
        next_page=not selected,
        rationale=decision["rationale"],
        tokens_out=tokens,
    )


def _promote(prefix: Sequence[str], buffer: CandidateBuffer, query_id: str) -> RankedList:
    """Selected ids first, then the remaining buffer in fused order.

    Scores are positional (harmonic) so the list stays a valid ranking;
    only the order is meaningful downstream.
    """
    rest = [i for i in buffer.ids if i not in set(prefix)]
    ordered = list(prefix) + rest
    entries = tuple((image_id, 1.0 / (pos + 1)) for pos, image_id in enumerate(ordered))
    return RankedList(view="fused", entries=entries, produced_for=query_id)


def _query_text(query: ComposedQuery, proxies: Mapping[str, str]) -> str:
    return prompts.format_query(proxies[query.ref_image], query.mod_text)


def _page_pairs(ids: Sequence[str], proxies: Mapping[str, str]) -> list[tuple[str, str]]:
    missing = [i for i in ids if i not in proxies]
    if missing:
        raise LookupError(f"pages need proxies for every id; missing {missing[:3]}")
    return [(i, proxies[i]) for i in ids]


def run_sequential(
    query: ComposedQuery,
    buffer: CandidateBuffer,
    experience,
    gateway: LlmGateway,
    *,
    proxies: Mapping[str, str],
    stages: int = DEFAULT_STAGES,
    max_page_items: int = DEFAULT_MAX_PAGE_ITEMS,
    template_dir: Optional[str] = None,
) -> DeliberationResult:
    """Staged selection: each stage's winner leads the next page.

    A stage that answers next_page leaves the current leader in place;
    the final selection is the last surviving leader, if any.
    """
    if not len(buffer):
        raise ValueError("buffer must be non-empty")
    if stages < 1:
        raise ValueError("sequential deliberation needs stages >= 1")
    pages = _page_slices(buffer.ids, stages)
    # shallow stage counts legitimately need wider windows (+1 for the leader)
    page_limit = max(max_page_items, len(pages[0]) + 1)
    query_text = _query_text(query, proxies)

    leading: Optional[str] = None
    decisions: list[PageDecision] = []
    for index, page_ids in enumerate(pages):
        shown = list(page_ids)
        if leading is not None and leading not in shown:
            shown = [leading] + shown
        decision = judge_page(
            query_text,
            _page_pairs(shown, proxies),
            leading,
            experience,
            "pick_one",
            gateway,
            page_index=index,
            max_page_items=page_limit,
            template_dir=template_dir,
        )
        decisions.append(decision)
        if decision.selected:
            leading = decision.selected[0]
    selected = (leading,) if leading is not None else ()
    return DeliberationResult(
        query_id=query.query_id,
        final_ranking=_promote(selected, buffer, query.query_id),
        selected=selected,
        strategy="sequential",
        stages_used=len(pages),
        total_tokens_out=sum(d.tokens_out for d in decisions),
        decisions=tuple(decisions),
    )


def run_parallel(
    query: ComposedQuery,
    buffer: CandidateBuffer,
    experience,
    gateway: LlmGateway,
    *,
    proxies: Mapping[str, str],
    stages: int = DEFAULT_STAGES,
    max_page_items: int = DEFAULT_MAX_PAGE_ITEMS,
    template_dir: Optional[str] = None,
) -> DeliberationResult:
    """Independent page scans merged by union, ordered by fused rank.

    If one page fails and another succeeds, the run degrades to the
    successful selections with a warning; if every page fails, the last
    error propagates.
    """
    if not len(buffer):
        raise ValueError("buffer must be non-empty")
    if stages < 1:
        raise ValueError("parallel deliberation needs stages >= 1")
    pages = _page_slices(buffer.ids, stages)
    page_limit = max(max_page_items, len(pages[0]))
    query_text = _query_text(query, proxies)

    def _judge(index_ids: tuple[int, list[str]]) -> PageDecision:
        index, page_ids = index_ids
        return judge_page(
            query_text,
            _page_pairs(page_ids, proxies),
            None,
            experience,
            "pick_many",
            gateway,
            page_index=index,
            max_page_items=page_limit,
            template_dir=template_dir,
        )

    decisions: list[PageDecision] = []
    errors: list[Exception] = []
    with ThreadPoolExecutor(max_workers=len(pages)) as pool:
        futures = [pool.submit(_judge, (i, p)) for i, p in enumerate(pages)]
        for future in futures:
            try:
                decisions.append(future.result())
            except ProviderError as exc:
                errors.append(exc)
    if errors and not decisions:
        raise errors[-1]
    if errors:
        log.warning(
            "%d of %d parallel pages failed; using the successful pages only",
            len(errors), len(pages),
        )

    union = {image_id for d in decisions for image_id in d.selected}
    merged = tuple(i for i in buffer.ids if i in union)
    return DeliberationResult(
        query_id=query.query_id,
        final_ranking=_promote(merged, buffer, query.query_id),
        selected=merged,
        strategy="parallel",
        stages_used=len(decisions),
        total_tokens_out=sum(d.tokens_out for d in decisions),
        decisions=tuple(decisions),
    )


def deliberate(
    query: ComposedQuery,
    buffer: CandidateBuffer,
    experience,
    gateway: LlmGateway,
    *,
    proxies: Mapping[str, str],
    strategy: Strategy = "sequential",
    stages: int = DEFAULT_STAGES,
    max_page_items: int = DEFAULT_MAX_PAGE_ITEMS,
    template_dir: Optional[str] = None,
) -> DeliberationResult:
    """Dispatch on strategy; ``stages=0`` disables deliberation entirely."""
    if stages == 0:
        return DeliberationResult(
            query_id=query.query_id,
            final_ranking=_promote((), buffer, query.query_id),
            selected=(),
            strategy=strategy,
            stages_used=0,
            total_tokens_out=0,
        )
    runner = run_sequential if strategy == "sequential" else run_parallel
    return runner(
        query, buffer, experience, gateway,
        proxies=proxies, stages=stages, max_page_items=max_page_items,
        template_dir=template_dir,
    )

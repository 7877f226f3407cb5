"""Per-query engine flow and the dataset-level runner.

Each query runs perception -> intent weighting -> fusion -> deliberation.
Queries execute in a thread pool; every provider call funnels through
the gateway's global concurrency bound. Token accounting wraps the
gateway per query, so per-query totals are exactly the sum of the
replies that query saw.
"""

from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional

from .config import EngineConfig
from .datasets import DatasetBundle, TripletRecord
from .deliberation import DeliberationResult, Strategy, choose_strategy, deliberate
from .domain import SemanticProxy
from .embedstore import EmbeddingMatrix
from .experience import ExperienceLibrary
from .gateway import LlmGateway, LlmReply, LlmRequest
from .perception import TextEmbedder, run_workers
from .router import AllBranchesEmpty, FusionConfig, fuse, weights_for_mode

log = logging.getLogger(__name__)


class RunFailed(RuntimeError):
    """More than the tolerated fraction of queries failed.

    Carries the collected outcomes so a report can still be written.
    """

    def __init__(self, message: str, outcomes: Optional[list] = None):
        super().__init__(message)
        self.outcomes = outcomes or []


class MeteredGateway:
    """Delegating gateway wrapper that tallies one query's output tokens."""

    def __init__(self, inner: LlmGateway):
        self._inner = inner
        self._lock = threading.Lock()
        self.tokens_out = 0
        self.replies = 0

    def complete(self, request: LlmRequest) -> LlmReply:
        reply = self._inner.complete(request)
        with self._lock:
            self.tokens_out += reply.tokens_out
            self.replies += 1
        return reply

    def bump(self, key: str, amount: int = 1) -> None:
        self._inner.bump(key, amount)


@dataclass
class QueryOutcome:
    query_id: str
    final_ids: tuple[str, ...] = ()
    buffer_ids: tuple[str, ...] = ()
    selected: tuple[str, ...] = ()
    strategy: str = ""
    stages_used: int = 0
    tokens_out: int = 0
    weights: tuple[float, float, float] = (0.0, 0.0, 0.0)
    error: Optional[str] = None


@dataclass
class EngineContext:
    """Everything a query needs; built once per run."""

    store: EmbeddingMatrix
    proxies: Mapping[str, SemanticProxy]
    gateway: LlmGateway
    embedder: TextEmbedder
    fusion: FusionConfig
    stages: int
    strategy: Strategy
    experience: ExperienceLibrary = field(default_factory=ExperienceLibrary)
    top_n: int = 200
    max_page_items: int = 26
    template_dir: Optional[str] = None

    @classmethod
    def from_config(
        cls,
        cfg: EngineConfig,
        *,
        store: EmbeddingMatrix,
        proxies: Mapping[str, SemanticProxy],
        gateway: LlmGateway,
        embedder: TextEmbedder,
        experience: ExperienceLibrary,
        multi_gt: bool,
    ) -> "EngineContext":
        strategy = cfg.deliberation.strategy_override or choose_strategy(multi_gt)
        return cls(
            store=store,
            proxies=proxies,
            gateway=gateway,
            embedder=embedder,
            fusion=cfg.fusion,
            stages=cfg.deliberation.stages,
            strategy=strategy,  # type: ignore[arg-type]
            experience=experience,
            top_n=cfg.workers_top_n,
            max_page_items=cfg.deliberation.max_page_items,
            template_dir=cfg.prompts_dir or None,
        )


def run_query(record: TripletRecord, ctx: EngineContext) -> QueryOutcome:
    """Run the full per-query flow; raises on unrecoverable errors."""
    query = record.to_query()
    metered = MeteredGateway(ctx.gateway)
    weights = weights_for_mode(
        ctx.fusion, query.mod_text, metered, template_dir=ctx.template_dir
    )
    r_pred, r_key, r_vis = run_workers(
        query, ctx.store, ctx.proxies, metered, ctx.embedder,
        top_n=ctx.top_n, template_dir=ctx.template_dir,
    )
    gallery = set(ctx.store.ids)
    buffer = fuse(
        {"pred": r_pred, "key": r_key, "vis": r_vis}, weights, ctx.fusion, gallery
    )
    proxy_texts = {image_id: ctx.proxies[image_id].text for image_id in buffer.ids}
    proxy_texts[query.ref_image] = ctx.proxies[query.ref_image].text
    result: DeliberationResult = deliberate(
        query, buffer, ctx.experience, metered,
        proxies=proxy_texts, strategy=ctx.strategy, stages=ctx.stages,
        max_page_items=ctx.max_page_items, template_dir=ctx.template_dir,
    )
    return QueryOutcome(
        query_id=query.query_id,
        final_ids=result.final_ranking.ids,
        buffer_ids=buffer.ids,
        selected=result.selected,
        strategy=result.strategy,
        stages_used=result.stages_used,
        tokens_out=metered.tokens_out,
        weights=weights.as_tuple(),
    )


def run_pipeline(
    bundle: DatasetBundle,
    ctx: EngineContext,
    *,
    limit: Optional[int] = None,
    workers: int = 4,
    fail_fraction: float = 0.1,
) -> list[QueryOutcome]:
    """Run every query (optionally limited) through the engine.

    Per-query failures are recorded, not raised; the whole run fails only
    when more than ``fail_fraction`` of the queries errored.
    """
    records = bundle.records[:limit] if limit is not None else bundle.records
    if not records:
        raise ValueError("no queries to run")

    def _one(record: TripletRecord) -> QueryOutcome:
        try:
            return run_query(record, ctx)
        except AllBranchesEmpty as exc:
            log.error("query %r aborted: %s", record.query_id, exc)
            return QueryOutcome(query_id=record.query_id, error=str(exc))
        except Exception as exc:
            log.error("query %r failed: %s", record.query_id, exc)
            return QueryOutcome(query_id=record.query_id, error=f"{type(exc).__name__}: {exc}")

    if workers <= 1:
        outcomes = [_one(r) for r in records]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_one, records))
    failed = sum(1 for o in outcomes if o.error)
    if failed > fail_fraction * len(outcomes):
        raise RunFailed(
            f"{failed}/{len(outcomes)} queries failed (tolerated fraction {fail_fraction})",
            outcomes=outcomes,
        )
    return outcomes

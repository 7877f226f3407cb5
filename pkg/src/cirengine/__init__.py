"""Composed image retrieval engine: multi-view perception, intent-weighted
reciprocal-rank fusion, and tournament-style deliberation over the
candidate buffer, with an offline-testable provider stack.
"""

from .domain import ComposedQuery, RankedList, SemanticProxy, rank_of
from .embedstore import EmbeddingMatrix, load_embv1, rank_by_image, rank_by_vector, write_embv1
from .gateway import LlmGateway, LlmReply, LlmRequest, MockProvider, parse_structured
from .router import CandidateBuffer, FusionConfig, IntentWeights, fuse, route_intent, split_pages
from .deliberation import DeliberationResult, PageDecision, choose_strategy, deliberate
from .experience import (
    ExperienceItem,
    ExperienceLibrary,
    SandboxInstance,
    build_sandbox,
    distill,
    reward_rollout,
    run_distillation,
    update_library,
)
from .metrics import map_at_k, recall_at_k, recall_subset_at_k
from .perception import imagine_target, parse_constraints, run_workers
from .synthetic import gen_synthetic

__version__ = "0.1.0"

__all__ = [
    "CandidateBuffer",
    "ComposedQuery",
    "DeliberationResult",
    "EmbeddingMatrix",
    "ExperienceItem",
    "ExperienceLibrary",
    "FusionConfig",
    "IntentWeights",
    "LlmGateway",
    "LlmReply",
    "LlmRequest",
    "MockProvider",
    "PageDecision",
    "RankedList",
    "SandboxInstance",
    "SemanticProxy",
    "build_sandbox",
    "choose_strategy",
    "deliberate",
    "distill",
    "fuse",
    "gen_synthetic",
    "imagine_target",
    "load_embv1",
    "map_at_k",
    "parse_constraints",
    "parse_structured",
    "rank_by_image",
    "rank_by_vector",
    "rank_of",
    "recall_at_k",
    "recall_subset_at_k",
    "reward_rollout",
    "route_intent",
    "run_distillation",
    "run_workers",
    "split_pages",
    "update_library",
    "write_embv1",
]

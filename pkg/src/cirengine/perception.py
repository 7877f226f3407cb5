"""The three perception branches that turn a composed query into
complementary gallery rankings.

- target imagination: one LLM call fuses the reference proxy with the
  modification text into a hypothesis of the target, retrieved by text.
- constraint parsing: one LLM call extracts (object, attribute) pairs
  from the modification text, normalized into a declarative phrase and
  retrieved by text.
- visual anchor: the reference image's own embedding ranks the gallery;
  no LLM involved.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Protocol

import numpy as np

from . import prompts
from .domain import ComposedQuery, RankedList, SemanticProxy
from .embedstore import EmbeddingMatrix, rank_by_image, rank_by_vector
from .gateway import (
    LlmGateway,
    LlmRequest,
    MalformedStructuredReply,
    ProviderError,
    structured_call,
)

log = logging.getLogger(__name__)

DEFAULT_BRANCH_DEPTH = 200
MAX_CONSTRAINT_PAIRS = 16


@dataclass(frozen=True)
class TargetHypothesis:
    """Text describing the imagined post-modification target."""

    query_id: str
    text: str

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("target hypothesis text is empty")


@dataclass(frozen=True)
class ConstraintSet:
    """Explicit (object, attribute) requirements plus their declarative form."""

    query_id: str
    pairs: tuple[tuple[str, str], ...]
    declarative: str

    def __post_init__(self) -> None:
        if not (1 <= len(self.pairs) <= MAX_CONSTRAINT_PAIRS):
            raise ValueError(
                f"constraint set must have 1..{MAX_CONSTRAINT_PAIRS} pairs, got {len(self.pairs)}"
            )
        for obj, _attr in self.pairs:
            if not obj:
                raise ValueError("constraint object must be non-empty")
        if not self.declarative:
            raise ValueError("declarative form must be non-empty")


class TextEmbedder(Protocol):
    """Maps text into the gallery's embedding space."""

    def embed(self, text: str) -> np.ndarray: ...


class HashingTextEmbedder:
    """Deterministic dataset-agnostic embedder: token hashing with signs.

    Serves the fully-offline mock tier; carries no semantics beyond
    token identity.
    """

    def __init__(self, dim: int, seed: int = 0):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self.seed = seed

    def embed(self, text: str) -> np.ndarray:
        import hashlib

        vec = np.zeros(self.dim, dtype=np.float64)
        for token in text.lower().split():
            digest = hashlib.sha256(f"{self.seed}:{token}".encode("utf-8")).digest()
            idx = int.from_bytes(digest[:4], "little") % self.dim
            sign = 1.0 if digest[4] % 2 == 0 else -1.0
            vec[idx] += sign
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            vec[0] = 1.0
            return vec
        return vec / norm


class FixtureTextEmbedder:
    """Exact-text lookup table, for tests and frozen fixtures."""

    def __init__(self, table: Mapping[str, np.ndarray]):
        self._table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}

    def embed(self, text: str) -> np.ndarray:
        try:
            return self._table[text]
        except KeyError:
            raise LookupError(f"no fixture embedding for text {text!r}") from None


class HttpTextEmbedder:
    """Client for the embedding sidecar's POST /embed endpoint."""

    def __init__(self, base_url: str, model_tag: str = "", timeout_s: float = 30.0):
        import requests

        self.base_url = base_url.rstrip("/")
        self.model_tag = model_tag
        self.timeout_s = timeout_s
        self._session = requests.Session()

    def embed(self, text: str) -> np.ndarray:
        resp = self._session.post(
            f"{self.base_url}/embed",
            json={"kind": "text", "items": [text], "model_tag": self.model_tag},
            timeout=self.timeout_s,
        )
        resp.raise_for_status()
        body = resp.json()
        return np.asarray(body["vectors"][0], dtype=np.float64)


def imagine_target(
    proxy: SemanticProxy,
    mod_text: str,
    gateway: LlmGateway,
    *,
    query_id: str = "",
    max_chars: int = 2048,
    template_dir: Optional[str] = None,
) -> TargetHypothesis:
    """Produce the imagined-target text with one LLM call.

    An empty generation falls back to "<proxy>; <mod_text>" so the branch
    always retrieves something.
    """
    if not proxy.text or not mod_text:
        raise ValueError("proxy text and mod_text must be non-empty")
    prompt = prompts.render(
        prompts.load_template("si_worker", template_dir),
        ref_proxy=proxy.text,
        mod_text=mod_text,
    )
    reply = gateway.complete(LlmRequest(role="si_worker", prompt=prompt))
    text = reply.text.strip()
    if not text:
        text = f"{proxy.text}; {mod_text}"
    return TargetHypothesis(query_id=query_id, text=text[:max_chars])


def declarative_from_pairs(pairs: list[tuple[str, str]]) -> str:
    """Join rule used when the LLM omits the declarative form."""
    return ", ".join(f"{attr} {obj}".strip() if attr else obj for obj, attr in pairs)


def parse_constraints(
    mod_text: str,
    gateway: LlmGateway,
    *,
    query_id: str = "",
    template_dir: Optional[str] = None,
) -> ConstraintSet:
    """Extract constraint pairs via a structured LLM call.

    One re-prompt on a malformed reply; a second failure (or an empty
    pair list) degrades to the single pair (mod_text, "").
    """
    if not mod_text:
        raise ValueError("mod_text must be non-empty")
    prompt = prompts.render(
        prompts.load_template("cp_worker", template_dir), mod_text=mod_text
    )
    request = LlmRequest(role="cp_worker", prompt=prompt, structured=True)
    try:
        (pairs, declarative), _ = structured_call(gateway, request, "constraints")
    except MalformedStructuredReply:
        gateway.bump("constraint_parse_failures")
        log.warning("constraint parsing failed twice for %r; degrading", query_id or mod_text)
        return ConstraintSet(
            query_id=query_id, pairs=((mod_text, ""),), declarative=mod_text
        )
    cleaned = [(o.strip(), a.strip()) for o, a in pairs if o.strip()]
    cleaned = cleaned[:MAX_CONSTRAINT_PAIRS]
    if not cleaned:
        return ConstraintSet(
            query_id=query_id, pairs=((mod_text, ""),), declarative=mod_text
        )
    if not declarative or not declarative.strip():
        declarative = declarative_from_pairs(cleaned)
    return ConstraintSet(
        query_id=query_id, pairs=tuple(cleaned), declarative=declarative.strip()
    )


def run_workers(
    query: ComposedQuery,
    store: EmbeddingMatrix,
    proxies: Mapping[str, SemanticProxy],
    gateway: LlmGateway,
    embedder: TextEmbedder,
    top_n: int = DEFAULT_BRANCH_DEPTH,
    *,
    template_dir: Optional[str] = None,
) -> tuple[RankedList, RankedList, RankedList]:
    """Run all three branches for one query.

    A failed LLM-dependent branch yields an empty RankedList and is
    logged; fusion tolerates empty branches. The visual branch is pure
    and never calls the gateway.
    """
    if query.ref_image not in proxies:
        raise LookupError(f"no proxy for reference image {query.ref_image!r}")
    ref_proxy = proxies[query.ref_image]

    try:
        hypothesis = imagine_target(
            ref_proxy, query.mod_text, gateway,
            query_id=query.query_id, template_dir=template_dir,
        )
        r_pred = rank_by_vector(
            store, embedder.embed(hypothesis.text), top_n,
            view="pred", produced_for=query.query_id,
        )
    except ProviderError as exc:
        log.warning("predicted-target branch failed for %r: %s", query.query_id, exc)
        r_pred = RankedList(view="pred", entries=(), produced_for=query.query_id)

    try:
        constraints = parse_constraints(
            query.mod_text, gateway, query_id=query.query_id, template_dir=template_dir
        )
        r_key = rank_by_vector(
            store, embedder.embed(constraints.declarative), top_n,
            view="key", produced_for=query.query_id,
        )
    except ProviderError as exc:
        log.warning("constraint branch failed for %r: %s", query.query_id, exc)
        r_key = RankedList(view="key", entries=(), produced_for=query.query_id)

    r_vis = rank_by_image(store, query.ref_image, top_n, produced_for=query.query_id)
    return r_pred, r_key, r_vis

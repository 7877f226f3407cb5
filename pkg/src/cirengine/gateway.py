"""Uniform LLM provider interface with retries, a global concurrency
bound, token accounting, and tolerant structured-reply parsing.

One provider is configured per role so that, e.g., a cheap model can
judge pages while a stronger one distills heuristics. Oracle providers
(ground-truth aware) live in the synthetic harness, never here.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable, Literal, Mapping, Optional, Protocol

log = logging.getLogger(__name__)

Role = Literal["si_worker", "cp_worker", "ir_router", "de_judge", "distiller", "logic_judge"]
ROLES: tuple[str, ...] = (
    "si_worker",
    "cp_worker",
    "ir_router",
    "de_judge",
    "distiller",
    "logic_judge",
)

SchemaKind = Literal["weights", "constraints", "page_decision", "heuristics", "score"]


class ProviderError(Exception):
    """Base class for provider failures."""


class TransientError(ProviderError):
    """Retriable failure (rate limiting, 5xx, connection reset)."""


class Timeout(TransientError):
    """Request timed out; retriable."""


class AuthError(ProviderError):
    """Non-retriable authentication/authorization failure."""


class Exhausted(ProviderError):
    """All retry attempts failed."""

    def __init__(self, message: str, attempts: int, last: Optional[Exception] = None):
        super().__init__(message)
        self.attempts = attempts
        self.last = last


class MalformedStructuredReply(ValueError):
    """A structured reply could not be parsed; carries the raw text."""

    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw
        self.replies: list = []


@dataclass(frozen=True)
class LlmRequest:
    role: Role
    prompt: str
    max_tokens: int = 512
    temperature: float = 0.0
    structured: bool = False

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")


@dataclass(frozen=True)
class LlmReply:
    text: str
    tokens_out: int
    provider: str
    latency_ms: int = 0

    def __post_init__(self) -> None:
        if self.tokens_out < 0:
            raise ValueError("tokens_out must be >= 0")


def fallback_token_count(text: str) -> int:
    """Whitespace token count, used when a provider reports no usage."""
    return len(text.split())


class LlmProvider(Protocol):
    name: str

    def complete(self, request: LlmRequest) -> LlmReply: ...


class LlmGateway:
    """Routes requests to per-role providers under one concurrency bound.

    Retries transient failures with exponential backoff; ``retries`` is the
    total attempt budget. The semaphore bound is global across roles.
    """

    def __init__(
        self,
        providers: Mapping[str, LlmProvider],
        *,
        concurrency_bound: int = 8,
        retries: int = 3,
        backoff_base_s: float = 0.2,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if concurrency_bound < 1:
            raise ValueError("concurrency_bound must be >= 1")
        if retries < 1:
            raise ValueError("retries must be >= 1")
        unknown = sorted(set(providers) - set(ROLES))
        if unknown:
            raise ValueError(f"unknown provider roles: {unknown}")
        self._providers = dict(providers)
        self._sem = threading.BoundedSemaphore(concurrency_bound)
        self.concurrency_bound = concurrency_bound
        self.retries = retries
        self.backoff_base_s = backoff_base_s
        self._sleep = sleep
        self._lock = threading.Lock()
        self.counters: dict[str, int] = {}

    def bump(self, key: str, amount: int = 1) -> None:
        with self._lock:
            self.counters[key] = self.counters.get(key, 0) + amount

    def complete(self, request: LlmRequest) -> LlmReply:
        provider = self._providers.get(request.role)
        if provider is None:
            raise ProviderError(f"no provider configured for role {request.role!r}")
        last: Optional[Exception] = None
        with self._sem:
            for attempt in range(1, self.retries + 1):
                try:
                    reply = provider.complete(request)
                except AuthError:
                    raise
                except TransientError as exc:
                    last = exc
                    self.bump("retries")
                    if attempt < self.retries:
                        self._sleep(self.backoff_base_s * (2 ** (attempt - 1)))
                    continue
                self.bump(f"calls.{request.role}")
                self.bump("tokens_out", reply.tokens_out)
                return reply
        raise Exhausted(
            f"provider {provider.name!r} failed after {self.retries} attempts: {last}",
            attempts=self.retries,
            last=last,
        )


_WORDS = (
    "amber", "brisk", "cedar", "dappled", "ember", "fjord", "gleam", "harbor",
    "indigo", "juniper", "kestrel", "lattice", "meadow", "nimbus", "ochre",
    "pebble", "quartz", "russet", "sable", "thistle", "umber", "vellum",
    "willow", "zephyr",
)

_MOCK_HEURISTICS = (
    "verify the changed attribute explicitly before selecting a candidate",
    "reject candidates that only match the reference and ignore the instruction",
    "prefer the candidate matching every stated constraint over partial matches",
    "when no candidate satisfies the instruction, answer next_page instead of guessing",
    "compare near-duplicate candidates attribute by attribute before deciding",
    "re-read the instruction for negations before confirming a selection",
)


def _extract_page_ids(prompt: str) -> list[str]:
    """Candidate ids as rendered by the page prompt (``id=<id> ::`` lines)."""
    ids: list[str] = []
    for line in prompt.splitlines():
        line = line.strip()
        if line.startswith("[") and " id=" in line and " :: " in line:
            token = line.split(" id=", 1)[1].split(" :: ", 1)[0].strip()
            if token:
                ids.append(token)
    return ids


class MockProvider:
    """Deterministic offline provider: a pure function of (seed, role, prompt).

    Replies are schema-valid for each role so the whole pipeline runs with
    no network. The judge rationale lists the candidate ids it scanned, so
    output-token counts grow with page size as they would for a real model.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.name = f"mock(seed={seed})"

    def _digest(self, role: str, prompt: str) -> bytes:
        payload = f"{self.seed}|{role}|{prompt}".encode("utf-8")
        return hashlib.sha256(payload).digest()

    def complete(self, request: LlmRequest) -> LlmReply:
        d = self._digest(request.role, request.prompt)
        word = lambda i: _WORDS[d[i] % len(_WORDS)]  # noqa: E731
        if request.role == "si_worker":
            text = f"a scene with {word(0)} {word(1)} and a {word(2)} {word(3)} nearby"
        elif request.role == "cp_worker":
            pairs = [{"object": word(0), "attribute": word(1)}]
            if d[2] % 2:
                pairs.append({"object": word(3), "attribute": ""})
            text = json.dumps({"constraints": pairs})
        elif request.role == "ir_router":
            raw = [1 + d[0] % 7, 1 + d[1] % 7, 1 + d[2] % 7]
            total = sum(raw)
            text = json.dumps({"weights": [round(v / total, 4) for v in raw]})
        elif request.role == "de_judge":
            ids = _extract_page_ids(request.prompt)
            rationale = f"scanned {len(ids)} candidates: " + " ".join(ids)
            if not ids or d[0] % 4 == 0:
                text = json.dumps(
                    {"selected": [], "next_page": True, "rationale": rationale}
                )
            else:
                pick = [ids[d[1] % len(ids)]]
                if "pick_many" in request.prompt and d[2] % 2 and len(ids) > 1:
                    second = ids[d[3] % len(ids)]
                    if second not in pick:
                        pick.append(second)
                text = json.dumps(
                    {"selected": pick, "next_page": False, "rationale": rationale}
                )
        elif request.role == "distiller":
            count = 1 + d[0] % 2
            chosen = sorted({_MOCK_HEURISTICS[d[i + 1] % len(_MOCK_HEURISTICS)] for i in range(count)})
            text = json.dumps({"heuristics": chosen})
        elif request.role == "logic_judge":
            text = json.dumps({"score": round((d[0] * 256 + d[1]) / 65535.0, 4)})
        else:  # pragma: no cover - role validated upstream
            raise ProviderError(f"mock has no template for role {request.role!r}")
        return LlmReply(
            text=text,
            tokens_out=fallback_token_count(text),
            provider=self.name,
            latency_ms=0,
        )


class HttpChatProvider:
    """Chat-completion HTTP client (OpenAI-style JSON protocol)."""

    def __init__(
        self,
        base_url: str,
        model: str,
        *,
        api_key_env: Optional[str] = None,
        timeout_s: float = 60.0,
        session: Any = None,
    ):
        import requests

        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s
        self._requests = requests
        self._session = session or requests.Session()
        self.name = f"http({model})"

    def _headers(self) -> dict[str, str]:
        import os

        headers = {"Content-Type": "application/json"}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env, "")
            if not key:
                raise AuthError(f"environment variable {self.api_key_env!r} is not set")
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, request: LlmRequest) -> LlmReply:
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        }
        started = time.perf_counter()
        try:
            resp = self._session.post(
                f"{self.base_url}/chat/completions",
                json=payload,
                headers=self._headers(),
                timeout=self.timeout_s,
            )
        except self._requests.Timeout as exc:
            raise Timeout(f"request to {self.base_url} timed out") from exc
        except self._requests.RequestException as exc:
            raise TransientError(f"request to {self.base_url} failed: {exc}") from exc
        latency_ms = int((time.perf_counter() - started) * 1000)
        if resp.status_code in (401, 403):
            raise AuthError(f"auth failure ({resp.status_code}) from {self.base_url}")
        if resp.status_code == 408 or resp.status_code == 429 or resp.status_code >= 500:
            raise TransientError(f"status {resp.status_code} from {self.base_url}")
        if resp.status_code != 200:
            raise ProviderError(f"status {resp.status_code} from {self.base_url}: {resp.text[:200]}")
        try:
            body = resp.json()
            text = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"unexpected response shape from {self.base_url}") from exc
        usage = body.get("usage") or {}
        tokens = usage.get("completion_tokens")
        if not isinstance(tokens, int) or tokens < 0:
            tokens = fallback_token_count(text)
        return LlmReply(text=text, tokens_out=tokens, provider=self.name, latency_ms=latency_ms)


_DECODER = json.JSONDecoder()


def _first_json_value(text: str) -> Any:
    for i, ch in enumerate(text):
        if ch in "[{":
            try:
                value, _ = _DECODER.raw_decode(text[i:])
            except ValueError:
                continue
            return value
    raise ValueError("no JSON object or array found")


def _as_weights(value: Any) -> tuple[float, float, float]:
    if isinstance(value, dict):
        value = value.get("weights")
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        raise ValueError("expected three weights")
    out = []
    for v in value:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ValueError(f"non-numeric weight {v!r}")
        out.append(float(v))
    return (out[0], out[1], out[2])


def _as_constraints(value: Any) -> tuple[list[tuple[str, str]], Optional[str]]:
    declarative: Optional[str] = None
    if isinstance(value, dict):
        declarative = value.get("declarative") if isinstance(value.get("declarative"), str) else None
        value = value.get("constraints")
    if not isinstance(value, list):
        raise ValueError("expected a list of constraints")
    pairs: list[tuple[str, str]] = []
    for item in value:
        if isinstance(item, dict):
            obj, attr = item.get("object"), item.get("attribute", "")
        elif isinstance(item, (list, tuple)) and len(item) == 2:
            obj, attr = item
        else:
            raise ValueError(f"bad constraint entry {item!r}")
        if not isinstance(obj, str):
            raise ValueError(f"constraint object must be a string, got {obj!r}")
        if attr is None:
            attr = ""
        if not isinstance(attr, str):
            raise ValueError(f"constraint attribute must be a string, got {attr!r}")
        pairs.append((obj, attr))
    return pairs, declarative


def _as_page_decision(value: Any) -> dict[str, Any]:
    if not isinstance(value, dict):
        raise ValueError("expected a JSON object")
    selected_raw = value.get("selected", [])
    if selected_raw is None:
        selected_raw = []
    if not isinstance(selected_raw, list):
        raise ValueError("'selected' must be a list")
    selected = [str(v) for v in selected_raw]
    next_page = value.get("next_page", not selected)
    if not isinstance(next_page, bool):
        raise ValueError("'next_page' must be a boolean")
    if selected and next_page:
        raise ValueError("reply both selects candidates and asks for next_page")
    rationale = value.get("rationale", "")
    if not isinstance(rationale, str):
        rationale = str(rationale)
    return {"selected": selected, "next_page": next_page, "rationale": rationale}


def _as_heuristics(value: Any) -> list[str]:
    if isinstance(value, dict):
        value = value.get("heuristics")
    if not isinstance(value, list):
        raise ValueError("expected a list of heuristics")
    out = [str(v).strip() for v in value if str(v).strip()]
    return out[:3]


def _as_score(text: str) -> float:
    import re

    try:
        value = _first_json_value(text)
        if isinstance(value, dict):
            value = value.get("score")
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError("no numeric score in JSON")
        return float(value)
    except ValueError:
        match = re.search(r"-?\d+(?:\.\d+)?", text)
        if not match:
            raise ValueError("no numeric score found")
        return float(match.group(0))


def parse_structured(reply: LlmReply | str, schema_kind: SchemaKind) -> Any:
    """Extract the first JSON value from a reply and validate it per role.

    Tolerates code fences and prose padding. Raises
    :class:`MalformedStructuredReply` (carrying the raw text) when nothing
    parseable and schema-valid is found.
    """
    text = reply.text if isinstance(reply, LlmReply) else reply
    try:
        if schema_kind == "score":
            return _as_score(text)
        value = _first_json_value(text)
        if schema_kind == "weights":
            return _as_weights(value)
        if schema_kind == "constraints":
            return _as_constraints(value)
        if schema_kind == "page_decision":
            return _as_page_decision(value)
        if schema_kind == "heuristics":
            return _as_heuristics(value)
        raise ValueError(f"unknown schema kind {schema_kind!r}")
    except ValueError as exc:
        raise MalformedStructuredReply(f"{schema_kind}: {exc}", raw=text) from exc


def structured_call(
    gateway: LlmGateway,
    request: LlmRequest,
    schema_kind: SchemaKind,
    *,
    reprompt_note: str = "Your previous reply could not be parsed. Reply with the JSON object only.",
) -> tuple[Any, list[LlmReply]]:
    """One structured call with a single re-prompt on a malformed reply.

    Returns (parsed value, replies seen). Raises MalformedStructuredReply
    when the re-prompt also fails; callers apply their own fallbacks.
    """
    replies: list[LlmReply] = []
    reply = gateway.complete(request)
    replies.append(reply)
    try:
        return parse_structured(reply, schema_kind), replies
    except MalformedStructuredReply:
        retry = LlmRequest(
            role=request.role,
            prompt=f"{request.prompt}\n\n{reprompt_note}",
            max_tokens=request.max_tokens,
            temperature=request.temperature,
            structured=request.structured,
        )
        reply = gateway.complete(retry)
        replies.append(reply)
        try:
            return parse_structured(reply, schema_kind), replies
        except MalformedStructuredReply as exc:
            exc.replies = replies
            raise

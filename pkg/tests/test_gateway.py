import threading
from concurrent.futures import ThreadPoolExecutor

import pytest

from cirengine.gateway import (
    AuthError,
    Exhausted,
    LlmGateway,
    LlmReply,
    LlmRequest,
    MalformedStructuredReply,
    MockProvider,
    TransientError,
    fallback_token_count,
    parse_structured,
)
from conftest import make_gateway


class FlakyProvider:
    name = "flaky"

    def __init__(self, failures, exc=TransientError):
        self.failures = failures
        self.exc = exc
        self.attempts = 0

    def complete(self, request):
        self.attempts += 1
        if self.attempts <= self.failures:
            raise self.exc("simulated outage")
        return LlmReply(text="ok", tokens_out=1, provider=self.name)


class CountingProvider:
    """Tracks concurrent in-flight completions."""

    name = "counting"

    def __init__(self):
        self._lock = threading.Lock()
        self.in_flight = 0
        self.peak = 0

    def complete(self, request):
        with self._lock:
            self.in_flight += 1
            self.peak = max(self.peak, self.in_flight)
        try:
            text = "pong"
            return LlmReply(text=text, tokens_out=fallback_token_count(text), provider=self.name)
        finally:
            with self._lock:
                self.in_flight -= 1


def _req(prompt="ping", role="de_judge"):
    return LlmRequest(role=role, prompt=prompt)


def test_mock_is_pure_function_of_seed_role_prompt():
    a = MockProvider(3).complete(_req(role="si_worker"))
    b = MockProvider(3).complete(_req(role="si_worker"))
    c = MockProvider(4).complete(_req(role="si_worker"))
    d = MockProvider(3).complete(_req(prompt="other", role="si_worker"))
    assert a.text == b.text
    assert a.text != c.text
    assert a.text != d.text


def test_retry_then_success_counts_attempts():
    provider = FlakyProvider(failures=2)
    gateway = make_gateway(provider, retries=3)
    reply = gateway.complete(_req())
    assert reply.text == "ok"
    assert provider.attempts == 3


def test_exhausted_after_budget():
    provider = FlakyProvider(failures=99)
    gateway = make_gateway(provider, retries=3)
    with pytest.raises(Exhausted) as err:
        gateway.complete(_req())
    assert err.value.attempts == 3
    assert provider.attempts == 3


def test_auth_error_is_not_retried():
    provider = FlakyProvider(failures=99, exc=AuthError)
    gateway = make_gateway(provider, retries=5)
    with pytest.raises(AuthError):
        gateway.complete(_req())
    assert provider.attempts == 1


def test_backoff_delays_are_exponential():
    sleeps = []
    provider = FlakyProvider(failures=3)
    gateway = LlmGateway(
        {"de_judge": provider},
        retries=4,
        backoff_base_s=0.1,
        sleep=sleeps.append,
    )
    gateway.complete(_req())
    assert sleeps == pytest.approx([0.1, 0.2, 0.4])


def test_concurrency_bound_is_respected():
    provider = CountingProvider()
    gateway = make_gateway(provider, concurrency_bound=4)
    with ThreadPoolExecutor(max_workers=32) as pool:
        list(pool.map(lambda i: gateway.complete(_req(prompt=f"p{i}")), range(1000)))
    assert provider.peak <= 4


def test_token_accounting_is_additive():
    gateway = make_gateway(MockProvider(0))
    total = 0
    for i in range(20):
        total += gateway.complete(_req(prompt=f"p{i}")).tokens_out
    assert gateway.counters["tokens_out"] == total


def test_missing_role_is_an_error():
    gateway = LlmGateway({"si_worker": MockProvider(0)}, backoff_base_s=0)
    with pytest.raises(Exception):
        gateway.complete(_req(role="de_judge"))


def test_parse_structured_strips_fences():
    reply = '```json\n{"weights": [0.5, 0.3, 0.2]}\n```'
    assert parse_structured(reply, "weights") == (0.5, 0.3, 0.2)


def test_parse_structured_takes_first_json_value():
    reply = 'thinking... {"weights": [1, 0, 0]} and also {"weights": [0, 1, 0]}'
    assert parse_structured(reply, "weights") == (1.0, 0.0, 0.0)


def test_parse_structured_no_json_raises():
    with pytest.raises(MalformedStructuredReply) as err:
        parse_structured("no structure here", "weights")
    assert err.value.raw == "no structure here"


def test_parse_structured_skips_false_brackets():
    reply = "set {not json} then [0.2, 0.3, 0.5] trailing"
    assert parse_structured(reply, "weights") == (0.2, 0.3, 0.5)


def test_parse_constraints_shapes():
    pairs, decl = parse_structured(
        '{"constraints": [{"object": "dog", "attribute": "running"}], "declarative": "running dog"}',
        "constraints",
    )
    assert pairs == [("dog", "running")]
    assert decl == "running dog"
    pairs, decl = parse_structured('[["background", "beach"]]', "constraints")
    assert pairs == [("background", "beach")]
    assert decl is None


def test_parse_page_decision():
    decision = parse_structured(
        '{"selected": ["g1"], "next_page": false, "rationale": "matches"}', "page_decision"
    )
    assert decision["selected"] == ["g1"]
    assert decision["next_page"] is False
    decision = parse_structured('{"selected": []}', "page_decision")
    assert decision["next_page"] is True
    with pytest.raises(MalformedStructuredReply):
        parse_structured('{"selected": ["g1"], "next_page": true}', "page_decision")


def test_parse_heuristics_caps_at_three():
    texts = parse_structured('{"heuristics": ["a", "b", "c", "d"]}', "heuristics")
    assert texts == ["a", "b", "c"]


def test_parse_score():
    assert parse_structured('{"score": 0.7}', "score") == pytest.approx(0.7)
    assert parse_structured("score: 0.25 overall", "score") == pytest.approx(0.25)


def test_parse_structured_adversarial_shapes():
    # fenced with a language hint and prose on both sides
    fenced = 'Sure!\n```json\n{"selected": ["g1"], "next_page": false, "rationale": "ok"}\n```\nHope that helps.'
    assert parse_structured(fenced, "page_decision")["selected"] == ["g1"]
    # nested objects: the outermost value is the one parsed
    nested = '{"constraints": [{"object": "sign", "attribute": "neon"}], "extra": {"selected": []}}'
    pairs, _ = parse_structured(nested, "constraints")
    assert pairs == [("sign", "neon")]
    # unicode and escaped quotes survive
    unicode_reply = '{"heuristics": ["pr\\u00fcfe die Farbe zuerst", "note the \\"exact\\" wording"]}'
    texts = parse_structured(unicode_reply, "heuristics")
    assert texts[0] == "prüfe die Farbe zuerst"
    # numeric candidate ids are coerced to strings
    numeric = '{"selected": [17], "next_page": false, "rationale": "r"}'
    assert parse_structured(numeric, "page_decision")["selected"] == ["17"]
    # weights inside a wrapper object still validate as a triple
    wrapped = 'thinking {"weights": [0.2, 0.2, 0.6], "why": "mostly visual"}'
    assert parse_structured(wrapped, "weights") == (0.2, 0.2, 0.6)
    # a bool is not a number
    with pytest.raises(MalformedStructuredReply):
        parse_structured('{"weights": [true, 0, 0]}', "weights")
    with pytest.raises(MalformedStructuredReply):
        parse_structured('{"weights": [0.5, 0.5]}', "weights")


def test_reply_token_fallback_matches_whitespace_count():
    reply = MockProvider(0).complete(_req(role="si_worker"))
    assert reply.tokens_out == fallback_token_count(reply.text)

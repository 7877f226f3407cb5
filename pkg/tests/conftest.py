import numpy as np
import pytest

from cirengine.embedstore import EmbeddingMatrix
from cirengine.gateway import LlmGateway, LlmReply, MockProvider, ROLES, fallback_token_count


class ScriptedProvider:
    """Replays canned reply texts in order; repeats the last one."""

    name = "scripted"

    def __init__(self, texts):
        self.texts = list(texts)
        self.calls = 0

    def complete(self, request):
        text = self.texts[min(self.calls, len(self.texts) - 1)]
        self.calls += 1
        return LlmReply(
            text=text, tokens_out=fallback_token_count(text), provider=self.name
        )


def make_gateway(provider=None, roles=ROLES, **kwargs):
    provider = provider or MockProvider(0)
    kwargs.setdefault("backoff_base_s", 0.0)
    return LlmGateway({role: provider for role in roles}, **kwargs)


@pytest.fixture
def mock_gateway():
    return make_gateway()


@pytest.fixture
def one_hot_store():
    ids = ("a", "b", "c")
    vectors = np.eye(3, dtype=np.float32)
    return EmbeddingMatrix.from_arrays(ids, vectors)


@pytest.fixture(scope="session")
def bench_small():
    from cirengine.synthetic import gen_synthetic

    return gen_synthetic(7, n_gallery=120, n_queries=12, n_attrs=4, noise=0.05)

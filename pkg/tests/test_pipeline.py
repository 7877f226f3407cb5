import pytest

from cirengine.gateway import LlmGateway, MockProvider, ROLES
from cirengine.metrics import map_at_k
from cirengine.pipeline import EngineContext, MeteredGateway, RunFailed, run_pipeline, run_query
from cirengine.router import FusionConfig


def _ctx(bench, providers=None, **overrides):
    gateway = LlmGateway(
        providers or bench.oracle_providers(), concurrency_bound=8, backoff_base_s=0
    )
    defaults = dict(
        store=bench.store,
        proxies=bench.proxies,
        gateway=gateway,
        embedder=bench.embedder(),
        fusion=FusionConfig(),
        stages=2,
        strategy="sequential",
        top_n=100,
    )
    defaults.update(overrides)
    return EngineContext(**defaults)


def test_run_query_produces_valid_outcome(bench_small):
    ctx = _ctx(bench_small)
    record = bench_small.bundle.records[0]
    outcome = run_query(record, ctx)
    assert outcome.error is None
    assert sorted(outcome.final_ids) == sorted(outcome.buffer_ids)
    assert outcome.tokens_out > 0
    assert abs(sum(outcome.weights) - 1.0) < 1e-6
    assert outcome.stages_used == 2


def test_metered_gateway_counts_exactly_the_replies(mock_gateway):
    metered = MeteredGateway(mock_gateway)
    from cirengine.gateway import LlmRequest

    total = 0
    for i in range(7):
        total += metered.complete(LlmRequest(role="si_worker", prompt=f"p{i}")).tokens_out
    assert metered.tokens_out == total
    assert metered.replies == 7


def test_run_pipeline_outcomes_align_with_records(bench_small):
    ctx = _ctx(bench_small)
    outcomes = run_pipeline(bench_small.bundle, ctx, workers=4)
    assert [o.query_id for o in outcomes] == [r.query_id for r in bench_small.bundle.records]
    assert all(o.error is None for o in outcomes)


def test_run_pipeline_is_deterministic_across_worker_counts(bench_small):
    results = []
    for workers in (1, 4):
        ctx = _ctx(bench_small)
        outcomes = run_pipeline(bench_small.bundle, ctx, workers=workers)
        results.append([(o.query_id, o.final_ids, o.tokens_out) for o in outcomes])
    assert results[0] == results[1]


def test_run_pipeline_limit(bench_small):
    ctx = _ctx(bench_small)
    outcomes = run_pipeline(bench_small.bundle, ctx, limit=3, workers=2)
    assert len(outcomes) == 3


def test_run_pipeline_fails_above_threshold(bench_small):
    class BrokenJudge:
        name = "broken"

        def complete(self, request):
            from cirengine.gateway import AuthError

            raise AuthError("no judge")

    providers = bench_small.oracle_providers()
    providers["si_worker"] = BrokenJudge()
    providers["cp_worker"] = BrokenJudge()
    providers["de_judge"] = BrokenJudge()
    ctx = _ctx(bench_small, providers=providers)
    with pytest.raises(RunFailed) as err:
        run_pipeline(bench_small.bundle, ctx, workers=2)
    assert len(err.value.outcomes) == len(bench_small.bundle.records)


def test_oracle_deliberation_improves_or_preserves_map(bench_small):
    ctx = _ctx(bench_small, strategy="parallel")
    outcomes = run_pipeline(bench_small.bundle, ctx, workers=4)
    by_id = {r.query_id: r for r in bench_small.bundle.records}
    for outcome in outcomes:
        targets = by_id[outcome.query_id].targets
        post = map_at_k(outcome.final_ids, targets, 5)
        fused = map_at_k(outcome.buffer_ids, targets, 5)
        assert post >= fused


def test_mock_tier_runs_whole_pipeline(bench_small):
    from cirengine.perception import HashingTextEmbedder

    providers = {role: MockProvider(3) for role in ROLES}
    ctx = _ctx(
        bench_small,
        providers=providers,
        embedder=HashingTextEmbedder(bench_small.store.dim, 3),
    )
    outcomes = run_pipeline(bench_small.bundle, ctx, workers=4)
    assert all(o.error is None for o in outcomes)
    assert all(o.tokens_out > 0 for o in outcomes)

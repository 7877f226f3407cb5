"""Trade test-time tokens for precision: deliberation depth and buffer size.

Depth L controls how many staged screening calls each query gets (L=0
disables deliberation; L=1 judges the whole buffer in one overloaded
window; L=2 splits it into two pages with a carried-over leading
candidate). The second sweep grows the candidate buffer K and tracks the
token cost per query, which scales with the pages the judge reads.

Run:  python3 demos/03_deliberation_depth.py
"""

from cirengine.gateway import LlmGateway
from cirengine.metrics import map_at_k, mean
from cirengine.pipeline import EngineContext, run_pipeline
from cirengine.router import FusionConfig, IntentWeights
from cirengine.synthetic import gen_synthetic

MIX = {"pred": 0.6, "key": 0.25, "vis": 0.15}
STATIC = IntentWeights.from_raw((0.6, 0.25, 0.15))

bench = gen_synthetic(
    seed=103, n_gallery=1500, n_queries=120, n_attrs=6, noise=0.02,
    intent_mix=MIX, counterfactual_stride=2,
)
by_id = {r.query_id: r for r in bench.bundle.records}


def run(stages, k=50, epsilon=0.15):
    gateway = LlmGateway(
        bench.oracle_providers(judge_epsilon=epsilon, seed=3), concurrency_bound=8
    )
    ctx = EngineContext(
        store=bench.store, proxies=bench.proxies, gateway=gateway,
        embedder=bench.embedder(),
        fusion=FusionConfig(mode="static", static_weights=STATIC, k=k),
        stages=stages, strategy="sequential",
    )
    outcomes = run_pipeline(bench.bundle, ctx, workers=8)
    final = mean([map_at_k(o.final_ids, by_id[o.query_id].targets, 5) for o in outcomes])
    tokens = mean([float(o.tokens_out) for o in outcomes])
    return 100 * final, tokens


print("depth sweep (K=50, judge error 15% per page)")
print(f"{'L':>3} {'mAP@5':>8} {'tokens/query':>14}")
for stages in (0, 1, 2, 3):
    final, tokens = run(stages)
    print(f"{stages:>3} {final:>8.2f} {tokens:>14.1f}")

print()
print("buffer sweep (L=2, exact judge); cost grows with K")
print(f"{'K':>4} {'mAP@5':>8} {'tokens/query':>14}")
for k in (10, 25, 50, 100):
    final, tokens = run(2, k=k, epsilon=0.0)
    print(f"{k:>4} {final:>8.2f} {tokens:>14.1f}")

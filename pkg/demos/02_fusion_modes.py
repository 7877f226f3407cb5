"""Compare the three fusion modes on an intent-skewed benchmark.

With an intent mix, each query leans on one perception branch and the
off-type branches are actively misleading (they describe the unmodified
reference). Uniform weighting dilutes the reliable branch, a tuned
global vector helps the majority intent, and per-query routing adapts to
each intent. The screening judge runs at a 15% per-page error rate so
buffer-order quality matters.

Run:  python3 demos/02_fusion_modes.py
"""

from cirengine.gateway import LlmGateway
from cirengine.metrics import map_at_k, mean
from cirengine.pipeline import EngineContext, run_pipeline
from cirengine.router import FusionConfig, IntentWeights
from cirengine.synthetic import gen_synthetic

MIX = {"pred": 0.6, "key": 0.25, "vis": 0.15}
STATIC = IntentWeights.from_raw((0.6, 0.25, 0.15))

bench = gen_synthetic(
    seed=101, n_gallery=1500, n_queries=120, n_attrs=6, noise=0.02,
    intent_mix=MIX, counterfactual_stride=2,
)
by_id = {r.query_id: r for r in bench.bundle.records}

print(f"{'mode':<8} {'fused mAP@5':>12} {'final mAP@5':>12}")
for mode in ("avg", "static", "ipr"):
    gateway = LlmGateway(
        bench.oracle_providers(judge_epsilon=0.15, seed=1), concurrency_bound=8
    )
    ctx = EngineContext(
        store=bench.store, proxies=bench.proxies, gateway=gateway,
        embedder=bench.embedder(),
        fusion=FusionConfig(mode=mode, static_weights=STATIC),
        stages=2, strategy="sequential",
    )
    outcomes = run_pipeline(bench.bundle, ctx, workers=8)
    fused = mean([map_at_k(o.buffer_ids, by_id[o.query_id].targets, 5) for o in outcomes])
    final = mean([map_at_k(o.final_ids, by_id[o.query_id].targets, 5) for o in outcomes])
    print(f"{mode:<8} {100 * fused:>12.2f} {100 * final:>12.2f}")

print()
print("avg dilutes the reliable branch; static fits the majority intent;")
print("per-query routing adapts to every intent and should rank best.")

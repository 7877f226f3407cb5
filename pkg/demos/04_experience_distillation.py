"""Distill screening heuristics offline and inspect the library.

The sandbox builds page-screening tasks with known answers under three
paradigms: the target hidden at random positions, pages with no correct
answer (the judge must say next_page), and pages stacked with
near-duplicate distractors. Groups of rollouts are scored by answer
consistency plus a logical-rigor bonus; the distiller contrasts the best
and worst rollouts into short rules, merged into a bounded library.

Run:  python3 demos/04_experience_distillation.py
"""

import random

from cirengine import experience as exp
from cirengine.gateway import LlmGateway, MockProvider, ROLES
from cirengine.pipeline import EngineContext, run_pipeline
from cirengine.router import FusionConfig
from cirengine.synthetic import gen_synthetic

bench = gen_synthetic(seed=11, n_gallery=300, n_queries=20, n_attrs=5, noise=0.05)
gateway = LlmGateway({role: MockProvider(11) for role in ROLES}, concurrency_bound=8)

# fused buffers feed the sandbox pages
ctx = EngineContext(
    store=bench.store, proxies=bench.proxies,
    gateway=LlmGateway(bench.oracle_providers(), concurrency_bound=8),
    embedder=bench.embedder(), fusion=FusionConfig(), stages=0, strategy="sequential",
)
outcomes = run_pipeline(bench.bundle, ctx, workers=4)
buffers = {o.query_id: o for o in outcomes}

proxy_texts = {i: p.text for i, p in bench.proxies.items()}


class _BufferView:
    def __init__(self, ids):
        self.ids = ids


pools = {}
rng = random.Random(0)
for paradigm in exp.PARADIGMS:
    pools[paradigm] = exp.build_sandbox(
        bench.bundle.records,
        {qid: _BufferView(o.buffer_ids) for qid, o in buffers.items()},
        paradigm,
        6,
        proxies=proxy_texts,
        attributes=bench.attributes,
        page_size=10,
        rng=rng,
    )
    sample = pools[paradigm][0]
    print(f"{paradigm}: page of {len(sample.candidates)}, answers {sorted(sample.answer_set)}")

config = exp.DistillationConfig(
    rounds=4, group_size=4, lam=0.2, seed=5,
    paradigm_mix=tuple((p, 1.0) for p in exp.PARADIGMS),
)
print()
library = exp.run_distillation(
    exp.SandboxPool(pools), gateway, config,
    on_round=lambda s: print(
        f"round {s['round']}: mean reward {s['mean_reward']:.3f}, library size {s['library_size']}"
    ),
)
print()
print("distilled heuristics (top scores first):")
for text in library.top_texts(8):
    print("  -", text)

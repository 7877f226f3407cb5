"""Quickstart: build a toy benchmark in memory and run the whole engine.

The synthetic benchmark describes every gallery image as an attribute
tuple, embeds those tuples (plus noise), and derives queries whose
target is the reference after a textual attribute change. Ground-truth
aware providers stand in for the LLM roles, so the run is fully offline
and deterministic.

Run:  python3 demos/01_quickstart.py
"""

from cirengine.gateway import LlmGateway
from cirengine.pipeline import EngineContext, run_pipeline
from cirengine.report import build_report
from cirengine.router import FusionConfig
from cirengine.synthetic import gen_synthetic

bench = gen_synthetic(seed=7, n_gallery=200, n_queries=25, n_attrs=5, noise=0.05)
record = bench.bundle.records[0]
print("example query")
print("  reference :", bench.proxies[record.ref_image].text)
print("  instruction:", record.mod_text)
print("  target    :", bench.proxies[next(iter(record.targets))].text)
print()

gateway = LlmGateway(bench.oracle_providers(), concurrency_bound=8)
ctx = EngineContext(
    store=bench.store,
    proxies=bench.proxies,
    gateway=gateway,
    embedder=bench.embedder(),
    fusion=FusionConfig(),          # tau=60, K=50, intent-routed fusion
    stages=2,                       # two-page staged deliberation
    strategy="sequential",
)
outcomes = run_pipeline(bench.bundle, ctx, workers=4)
report = build_report(outcomes, bench.bundle.records, {"demo": "quickstart"})
print(report.to_text_table())
print()
print("one query's journey:")
outcome = outcomes[0]
print("  buffer head :", list(outcome.buffer_ids[:5]))
print("  selected    :", list(outcome.selected))
print("  final head  :", list(outcome.final_ids[:5]))
print("  tokens spent:", outcome.tokens_out)

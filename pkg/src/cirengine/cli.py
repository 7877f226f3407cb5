"""Command-line surface: ingest-proxies, run, evaluate, sweep-k, distill,
gen-synthetic.

Exit codes: 0 success, 1 run failure, 2 config or I/O error. Every
command honors --seed; under the mock and oracle tiers outputs are
deterministic (wall-clock excepted).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional

from . import experience as exp
from .config import ConfigError, EngineConfig, config_summary, load_config
from .datasets import (
    DatasetBundle,
    MissingGalleryEntry,
    SchemaError,
    load_dataset,
    load_proxies,
    save_proxies,
)
from .domain import DomainError, SemanticProxy
from .embedstore import Embv1Error, load_embv1
from .gateway import HttpChatProvider, LlmGateway, MockProvider, ProviderError, ROLES
from .metrics import MAP_KS, map_at_k, mean, recall_at_k
from .perception import HashingTextEmbedder, HttpTextEmbedder
from .pipeline import EngineContext, RunFailed, run_pipeline
from .report import RunReport, build_report, sweep_csv
from .synthetic import SyntheticBenchmark, Unsatisfiable, gen_synthetic, load_synthetic_dir

log = logging.getLogger(__name__)

CONFIG_IO_ERRORS = (
    ConfigError,
    SchemaError,
    MissingGalleryEntry,
    Embv1Error,
    DomainError,
    Unsatisfiable,
    FileNotFoundError,
    OSError,
)


def _load_bundle(cfg: EngineConfig) -> tuple[DatasetBundle, Optional[SyntheticBenchmark]]:
    if cfg.dataset.kind == "synthetic":
        source = cfg.dataset.dir or cfg.dataset.annotations
        if not source:
            raise ConfigError("dataset.paths.dir is required for synthetic datasets")
        bench = load_synthetic_dir(source)
        return bench.bundle, bench
    if not cfg.dataset.annotations:
        raise ConfigError("dataset.paths.annotations is required")
    bundle = load_dataset(
        cfg.dataset.kind,  # type: ignore[arg-type]
        cfg.dataset.annotations,
        gallery_path=cfg.dataset.gallery or None,
    )
    return bundle, None


def _build_gateway(cfg: EngineConfig, tier: str, seed: int, bench, judge_epsilon: float) -> LlmGateway:
    if tier == "mock":
        providers = {role: MockProvider(seed) for role in ROLES}
    elif tier == "oracle":
        if bench is None:
            raise ConfigError("--oracle requires a synthetic dataset")
        providers = bench.oracle_providers(judge_epsilon=judge_epsilon, seed=seed)
    elif tier == "live":
        providers = {}
        for role in ROLES:
            role_cfg = cfg.llm.role_config(role)
            if role_cfg.provider == "http":
                providers[role] = HttpChatProvider(
                    role_cfg.base_url,
                    role_cfg.model,
                    api_key_env=cfg.llm.api_key_env or None,
                )
            else:
                log.warning("--live run, but role %s has no http provider; using the mock", role)
                providers[role] = MockProvider(seed)
    else:
        raise ConfigError(f"unknown provider tier {tier!r}")
    return LlmGateway(
        providers,
        concurrency_bound=cfg.llm.concurrency_bound,
        retries=cfg.llm.retries,
        backoff_base_s=cfg.llm.backoff_ms / 1000.0,
    )


def _build_embedder(cfg: EngineConfig, tier: str, seed: int, store, bench):
    if tier == "oracle" or cfg.embedder.kind == "oracle":
        if bench is None:
            raise ConfigError("the oracle embedder requires a synthetic dataset")
        return bench.embedder()
    if tier == "live" and cfg.embedder.kind == "http":
        return HttpTextEmbedder(cfg.embedder.base_url, cfg.embedder.model_tag)
    return HashingTextEmbedder(store.dim, seed)


def _load_experience(cfg: EngineConfig) -> exp.ExperienceLibrary:
    if cfg.experience_path and Path(cfg.experience_path).exists():
        return exp.load_library(cfg.experience_path)
    return exp.ExperienceLibrary()


def _prepare_run(cfg: EngineConfig, args) -> tuple[DatasetBundle, EngineContext]:
    bundle, bench = _load_bundle(cfg)
    if bench is not None:
        store = bench.store
        proxies = dict(bench.proxies)
    else:
        if not cfg.embeddings:
            raise ConfigError("embeddings path is required")
        if not cfg.proxies:
            raise ConfigError("proxies path is required")
        store = load_embv1(cfg.embeddings)
        proxies = load_proxies(cfg.proxies)
    missing = [i for i in bundle.gallery if i not in store]
    if missing:
        raise MissingGalleryEntry(
            f"embeddings do not cover the gallery; missing {missing[:5]} "
            f"({len(missing)} total)"
        )
    missing_proxies = [i for i in bundle.gallery if i not in proxies]
    if missing_proxies:
        raise MissingGalleryEntry(
            f"proxies do not cover the gallery; missing {missing_proxies[:5]} "
            f"({len(missing_proxies)} total)"
        )
    seed = cfg.seed if args.seed is None else args.seed
    gateway = _build_gateway(cfg, args.tier, seed, bench, getattr(args, "judge_epsilon", 0.0))
    embedder = _build_embedder(cfg, args.tier, seed, store, bench)
    ctx = EngineContext.from_config(
        cfg,
        store=store,
        proxies=proxies,
        gateway=gateway,
        embedder=embedder,
        experience=_load_experience(cfg),
        multi_gt=bundle.multi_gt,
    )
    return bundle, ctx


def _apply_overrides(cfg: EngineConfig, args) -> EngineConfig:
    fusion = cfg.fusion
    if getattr(args, "fusion_mode", None):
        fusion = replace(fusion, mode=args.fusion_mode)
    if getattr(args, "k", None):
        fusion = replace(fusion, k=args.k)
    if getattr(args, "tau", None):
        fusion = replace(fusion, tau=args.tau)
    deliberation = cfg.deliberation
    if getattr(args, "stages", None) is not None:
        deliberation = replace(deliberation, stages=args.stages)
    if getattr(args, "strategy", None):
        deliberation = replace(deliberation, strategy_override=args.strategy)
    seed = cfg.seed if args.seed is None else args.seed
    return replace(cfg, fusion=fusion, deliberation=deliberation, seed=seed)


def _run_once(cfg: EngineConfig, args) -> RunReport:
    started = time.perf_counter()
    bundle, ctx = _prepare_run(cfg, args)
    try:
        outcomes = run_pipeline(
            bundle, ctx, limit=args.limit, workers=cfg.runner_workers
        )
        failed = False
    except RunFailed as exc:
        outcomes = exc.outcomes
        failed = True
    report = build_report(
        outcomes,
        bundle.records,
        config_summary(cfg),
        wall_clock_seconds=time.perf_counter() - started,
    )
    report.config["provider_tier"] = args.tier
    if failed:
        report.aggregates["run_failed"] = True
    return report


def cmd_run(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    report = _run_once(cfg, args)
    if args.out:
        report.write(args.out)
    print(report.to_text_table())
    if report.aggregates.get("run_failed"):
        print("run failed: too many per-query errors", file=sys.stderr)
        return 1
    return 0


def _score_report(report_path: str, by_id) -> dict:
    doc = json.loads(Path(report_path).read_text(encoding="utf-8"))
    recalls = {k: [] for k in (1, 5, 10, 50)}
    aps = {k: [] for k in MAP_KS}
    for row in doc.get("queries", []):
        record = by_id.get(row.get("query_id"))
        ranking = row.get("final_ranking") or []
        if record is None or not record.targets or row.get("error"):
            continue
        for k in recalls:
            recalls[k].append(recall_at_k(ranking, record.targets, k))
        for k in aps:
            aps[k].append(map_at_k(ranking, record.targets, k))
    out = {"n_scored": len(next(iter(recalls.values()), []))}
    for k, values in recalls.items():
        if values:
            out[f"recall_at_{k}"] = round(100.0 * mean(values), 2)
    for k, values in aps.items():
        if values:
            out[f"map_at_{k}"] = round(100.0 * mean(values), 2)
    return out


def cmd_evaluate(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    bundle, _ = _load_bundle(cfg)
    by_id = {r.query_id: r for r in bundle.records}
    scored = [_score_report(path, by_id) for path in args.report]
    if len(scored) == 1:
        print(json.dumps(scored[0], indent=2, sort_keys=True))
        return 0
    # several reports (e.g. per-category runs): emit each plus their average
    keys = sorted({k for s in scored for k in s if k != "n_scored"})
    averaged = {
        k: round(mean([s[k] for s in scored if k in s]), 2) for k in keys
    }
    averaged["n_scored"] = sum(s["n_scored"] for s in scored)
    print(json.dumps({"reports": scored, "average": averaged}, indent=2, sort_keys=True))
    return 0


def cmd_sweep_k(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    k_list = sorted({int(v) for v in args.k_list.split(",") if v.strip()})
    if not k_list or min(k_list) < 2:
        raise ConfigError("--k-list needs comma-separated integers >= 2")
    rows = []
    for k in k_list:
        swept = replace(cfg, fusion=replace(cfg.fusion, k=k))
        report = _run_once(swept, args)
        rows.append(
            {
                "k": k,
                "map_at_5": report.aggregates.get("map_at_5", 0.0),
                "map_at_10": report.aggregates.get("map_at_10", 0.0),
                "map_at_25": report.aggregates.get("map_at_25", 0.0),
                "map_at_50": report.aggregates.get("map_at_50", 0.0),
                "mean_tokens": report.aggregates.get("mean_tokens_out", 0.0),
            }
        )
    csv_text = sweep_csv(rows)
    if args.out:
        Path(args.out).write_text(csv_text, encoding="utf-8")
    print(csv_text, end="")
    return 0


def cmd_distill(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out_path = args.out or cfg.experience_path
    if not out_path:
        raise ConfigError("distill needs --out or experience.path in the config")
    bundle, ctx = _prepare_run(cfg, args)
    labeled = [r for r in bundle.records if r.targets]
    if not labeled:
        raise ConfigError("distillation needs labeled queries")
    page_size = min(25, max(2, min(len(ctx.store), cfg.fusion.k) - 1))
    buffers = {}
    sample = labeled[: args.sandbox_queries] if args.sandbox_queries else labeled
    from .router import fuse, weights_for_mode

    for record in sample:
        query = record.to_query()
        from .perception import run_workers

        weights = weights_for_mode(ctx.fusion, query.mod_text, ctx.gateway, template_dir=ctx.template_dir)
        branches = run_workers(
            query, ctx.store, ctx.proxies, ctx.gateway, ctx.embedder,
            top_n=ctx.top_n, template_dir=ctx.template_dir,
        )
        buffers[record.query_id] = fuse(
            dict(zip(("pred", "key", "vis"), branches)), weights, ctx.fusion,
            set(ctx.store.ids),
        )
    proxy_texts = {i: p.text for i, p in ctx.proxies.items()}
    attributes = bundle.extras.get("attributes")
    import random as _random

    pool_rng = _random.Random(cfg.seed)
    pools: dict[str, list] = {}
    per_paradigm = max(4, args.rounds * 2)
    for paradigm in exp.PARADIGMS:
        if paradigm == "counterfactual_defense" and attributes is None:
            continue
        try:
            pools[paradigm] = exp.build_sandbox(
                sample, buffers, paradigm, per_paradigm,
                proxies=proxy_texts, attributes=attributes,
                page_size=page_size, rng=pool_rng,
            )
        except exp.InsufficientCandidates as error:
            log.warning("skipping paradigm %s: %s", paradigm, error)
    if not pools:
        raise ConfigError("no sandbox paradigm could be built from this dataset")
    mix = tuple((p, 1.0) for p in pools)
    config = exp.DistillationConfig(
        rounds=args.rounds,
        group_size=args.group_size,
        lam=args.lam,
        paradigm_mix=mix,  # type: ignore[arg-type]
        seed=cfg.seed,
    )
    judge = exp.gateway_logic_judge(ctx.gateway, ctx.template_dir)
    library = exp.run_distillation(
        exp.SandboxPool(pools), ctx.gateway, config,
        out_path=out_path, judge=judge, template_dir=ctx.template_dir,
        on_round=lambda stats: print(
            f"round {stats['round']}: mean reward {stats['mean_reward']:.4f}, "
            f"library size {stats['library_size']}"
        ),
    )
    print(f"persisted {len(library)} heuristics to {out_path}")
    return 0


def cmd_gen_synthetic(args) -> int:
    mix = None
    if args.intent_mix:
        mix = {}
        for part in args.intent_mix.split(","):
            name, _, weight = part.partition("=")
            mix[name.strip()] = float(weight)
    bench = gen_synthetic(
        args.seed if args.seed is not None else 0,
        n_gallery=args.gallery,
        n_queries=args.queries,
        n_attrs=args.attrs,
        noise=args.noise,
        intent_mix=mix,
    )
    out = Path(args.out)
    bench.write_to(out)
    config = {
        "seed": bench.meta["seed"],
        "dataset": {"kind": "synthetic", "paths": {"dir": "."}},
        "fusion": {"mode": "ipr", "tau": 60.0, "k": args.k or 50},
        "deliberation": {"L": 2},
        "embedder": {"kind": "oracle"},
    }
    (out / "config.json").write_text(
        json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"wrote synthetic benchmark ({args.gallery} items, {args.queries} queries) to {out}")
    return 0


def cmd_ingest_proxies(args) -> int:
    raw = Path(args.input)
    if not raw.exists():
        raise FileNotFoundError(f"input file does not exist: {raw}")
    proxies: dict[str, SemanticProxy] = {}
    for line_no, line in enumerate(raw.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{raw}:{line_no}: invalid JSON: {exc}") from exc
        image_id = str(obj.get("image_id") or obj.get("id") or "")
        text = str(obj.get("text") or "").strip()
        if not image_id or not text:
            raise SchemaError(f"{raw}:{line_no}: needs image_id and text")
        if len(text) > args.max_chars:
            raise SchemaError(
                f"{raw}:{line_no}: proxy text has {len(text)} characters, cap is {args.max_chars}"
            )
        if image_id in proxies:
            raise SchemaError(f"{raw}:{line_no}: duplicate proxy for {image_id!r}")
        source = obj.get("source", "precomputed")
        proxies[image_id] = SemanticProxy(image=image_id, text=text, source=source)
    save_proxies(args.out, proxies)
    print(f"ingested {len(proxies)} proxies to {args.out}")
    return 0


def _add_common_run_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="engine config JSON")
    tier = parser.add_mutually_exclusive_group()
    tier.add_argument("--mock", dest="tier", action="store_const", const="mock")
    tier.add_argument("--oracle", dest="tier", action="store_const", const="oracle")
    tier.add_argument("--live", dest="tier", action="store_const", const="live")
    parser.set_defaults(tier="mock")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--limit", type=int, default=None, help="run only the first N queries")
    parser.add_argument("--fusion-mode", choices=("ipr", "static", "avg"), default=None)
    parser.add_argument("--k", type=int, default=None, help="candidate buffer size")
    parser.add_argument("--tau", type=float, default=None)
    parser.add_argument("--stages", "--L", dest="stages", type=int, default=None)
    parser.add_argument("--strategy", choices=("sequential", "parallel"), default=None)
    parser.add_argument(
        "--judge-epsilon", type=float, default=0.0,
        help="oracle tier only: calibrated per-page judge error rate",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cirengine",
        description="Composed image retrieval with multi-view fusion and staged deliberation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the full pipeline and report metrics")
    _add_common_run_args(run)
    run.add_argument("--out", default=None, help="write the report JSON here")
    run.set_defaults(func=cmd_run)

    evaluate = sub.add_parser("evaluate", help="re-score existing reports (several are averaged)")
    _add_common_run_args(evaluate)
    evaluate.add_argument("--report", required=True, action="append")
    evaluate.set_defaults(func=cmd_evaluate)

    sweep = sub.add_parser("sweep-k", help="run once per buffer size, emit CSV")
    _add_common_run_args(sweep)
    sweep.add_argument("--k-list", default="10,25,50")
    sweep.add_argument("--out", default=None)
    sweep.set_defaults(func=cmd_sweep_k)

    distill = sub.add_parser("distill", help="distill screening heuristics")
    _add_common_run_args(distill)
    distill.add_argument("--rounds", type=int, default=3)
    distill.add_argument("--group-size", type=int, default=4)
    distill.add_argument("--lam", type=float, default=0.2)
    distill.add_argument("--sandbox-queries", type=int, default=8)
    distill.add_argument("--out", default=None, help="library path (defaults to experience.path)")
    distill.set_defaults(func=cmd_distill)

    gen = sub.add_parser("gen-synthetic", help="generate a seeded benchmark directory")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--gallery", type=int, default=200)
    gen.add_argument("--queries", type=int, default=50)
    gen.add_argument("--attrs", type=int, default=5)
    gen.add_argument("--noise", type=float, default=0.05)
    gen.add_argument("--intent-mix", default=None, help="e.g. pred=0.6,key=0.25,vis=0.15")
    gen.add_argument("--k", type=int, default=None, help="buffer size for the written config")
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen_synthetic)

    ingest = sub.add_parser("ingest-proxies", help="validate and normalize a proxy JSONL file")
    ingest.add_argument("--input", required=True)
    ingest.add_argument("--out", required=True)
    ingest.add_argument("--max-chars", type=int, default=2048)
    ingest.set_defaults(func=cmd_ingest_proxies)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CONFIG_IO_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RunFailed, ProviderError) as exc:
        print(f"run error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Engine configuration: a strict JSON document with typo-safe validation.

Unknown keys are rejected with their dotted path. Relative paths are
resolved against the config file's directory, so a generated benchmark
directory is runnable in place.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

from .gateway import ROLES
from .router import FusionConfig, IntentWeights

PROVIDER_TIERS = ("mock", "oracle", "live")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RoleProviderConfig:
    provider: str = "mock"
    base_url: str = ""
    model: str = ""

    def __post_init__(self) -> None:
        if self.provider not in ("mock", "http"):
            raise ConfigError(f"unknown provider kind {self.provider!r}")
        if self.provider == "http" and not (self.base_url and self.model):
            raise ConfigError("http providers need base_url and model")


@dataclass(frozen=True)
class LlmConfig:
    api_key_env: str = ""
    concurrency_bound: int = 8
    retries: int = 3
    backoff_ms: int = 200
    default: RoleProviderConfig = field(default_factory=RoleProviderConfig)
    roles: tuple[tuple[str, RoleProviderConfig], ...] = ()

    def __post_init__(self) -> None:
        if self.concurrency_bound < 1:
            raise ConfigError("llm.concurrency_bound must be >= 1")
        if self.retries < 1:
            raise ConfigError("llm.retries must be >= 1")
        if self.backoff_ms < 0:
            raise ConfigError("llm.backoff_ms must be >= 0")
        for role, _ in self.roles:
            if role not in ROLES:
                raise ConfigError(f"llm.roles: unknown role {role!r}")

    def role_config(self, role: str) -> RoleProviderConfig:
        for name, cfg in self.roles:
            if name == role:
                return cfg
        return self.default


@dataclass(frozen=True)
class DeliberationConfig:
    stages: int = 2
    strategy_override: Optional[str] = None
    max_page_items: int = 26

    def __post_init__(self) -> None:
        if not (0 <= self.stages <= 4):
            raise ConfigError(f"deliberation.L must be in 0..4, got {self.stages}")
        if self.strategy_override not in (None, "sequential", "parallel"):
            raise ConfigError(f"bad strategy_override {self.strategy_override!r}")
        if self.max_page_items < 2:
            raise ConfigError("deliberation.max_page_items must be >= 2")


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    annotations: str = ""
    gallery: str = ""
    dir: str = ""

    def __post_init__(self) -> None:
        if self.kind not in ("cirr", "circo", "fashioniq", "generic_jsonl", "synthetic"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")


@dataclass(frozen=True)
class EmbedderConfig:
    kind: str = "hashing"
    base_url: str = ""
    model_tag: str = ""

    def __post_init__(self) -> None:
        if self.kind not in ("hashing", "oracle", "http"):
            raise ConfigError(f"unknown embedder kind {self.kind!r}")
        if self.kind == "http" and not self.base_url:
            raise ConfigError("http embedder needs base_url")


@dataclass(frozen=True)
class EngineConfig:
    seed: int = 0
    embeddings: str = ""
    proxies: str = ""
    fusion: FusionConfig = field(default_factory=FusionConfig)
    deliberation: DeliberationConfig = field(default_factory=DeliberationConfig)
    experience_path: str = ""
    llm: LlmConfig = field(default_factory=LlmConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    workers_top_n: int = 200
    runner_workers: int = 4
    prompts_dir: str = ""

    def __post_init__(self) -> None:
        if self.workers_top_n < 1:
            raise ConfigError("workers.top_n must be >= 1")
        if self.runner_workers < 1:
            raise ConfigError("runner.workers must be >= 1")


def _check_keys(obj: Mapping[str, Any], allowed: set[str], path: str) -> None:
    unknown = sorted(set(obj) - allowed)
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(f"unknown config key: {where}")


def _get(obj: Mapping[str, Any], key: str, kind, default, path: str):
    if key not in obj or obj[key] is None:
        return default
    value = obj[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is not None and (not isinstance(value, kind) or isinstance(value, bool) and kind is not bool):
        raise ConfigError(f"config key {path}.{key} has wrong type: {value!r}")
    return value


def _parse_role_provider(obj: Any, path: str) -> RoleProviderConfig:
    if not isinstance(obj, Mapping):
        raise ConfigError(f"{path} must be an object")
    _check_keys(obj, {"provider", "base_url", "model"}, path)
    try:
        return RoleProviderConfig(
            provider=_get(obj, "provider", str, "mock", path),
            base_url=_get(obj, "base_url", str, "", path),
            model=_get(obj, "model", str, "", path),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_from_dict(doc: Mapping[str, Any], base_dir: Optional[Path] = None) -> EngineConfig:
    if not isinstance(doc, Mapping):
        raise ConfigError("config root must be an object")
    _check_keys(
        doc,
        {
            "seed", "embeddings", "proxies", "fusion", "deliberation",
            "experience", "llm", "dataset", "embedder", "workers", "runner",
            "prompts",
        },
        "",
    )

    def _resolve(path_str: str) -> str:
        if not path_str or base_dir is None:
            return path_str
        p = Path(path_str)
        return str(p if p.is_absolute() else base_dir / p)

    fusion_doc = doc.get("fusion") or {}
    _check_keys(fusion_doc, {"mode", "tau", "k", "static_weights"}, "fusion")
    static_raw = fusion_doc.get("static_weights")
    if static_raw is not None:
        if not isinstance(static_raw, list) or len(static_raw) != 3:
            raise ConfigError("fusion.static_weights must be a list of three numbers")
        static = IntentWeights.from_raw(tuple(float(v) for v in static_raw))
    else:
        static = IntentWeights.uniform()
    try:
        fusion = FusionConfig(
            tau=_get(fusion_doc, "tau", float, 60.0, "fusion"),
            k=_get(fusion_doc, "k", int, 50, "fusion"),
            mode=_get(fusion_doc, "mode", str, "ipr", "fusion"),
            static_weights=static,
        )
    except ValueError as exc:
        raise ConfigError(f"fusion: {exc}") from exc

    delib_doc = doc.get("deliberation") or {}
    _check_keys(delib_doc, {"L", "strategy_override", "max_page_items"}, "deliberation")
    deliberation = DeliberationConfig(
        stages=_get(delib_doc, "L", int, 2, "deliberation"),
        strategy_override=_get(delib_doc, "strategy_override", str, None, "deliberation"),
        max_page_items=_get(delib_doc, "max_page_items", int, 26, "deliberation"),
    )

    exp_doc = doc.get("experience") or {}
    _check_keys(exp_doc, {"path"}, "experience")
    experience_path = _resolve(_get(exp_doc, "path", str, "", "experience"))

    llm_doc = doc.get("llm") or {}
    _check_keys(
        llm_doc,
        {"api_key_env", "concurrency_bound", "retries", "backoff_ms", "default", "roles"},
        "llm",
    )
    roles_doc = llm_doc.get("roles") or {}
    if not isinstance(roles_doc, Mapping):
        raise ConfigError("llm.roles must be an object")
    roles = tuple(
        (role, _parse_role_provider(cfg, f"llm.roles.{role}"))
        for role, cfg in sorted(roles_doc.items())
    )
    llm = LlmConfig(
        api_key_env=_get(llm_doc, "api_key_env", str, "", "llm"),
        concurrency_bound=_get(llm_doc, "concurrency_bound", int, 8, "llm"),
        retries=_get(llm_doc, "retries", int, 3, "llm"),
        backoff_ms=_get(llm_doc, "backoff_ms", int, 200, "llm"),
        default=_parse_role_provider(llm_doc.get("default") or {}, "llm.default"),
        roles=roles,
    )

    dataset_doc = doc.get("dataset") or {}
    _check_keys(dataset_doc, {"kind", "paths"}, "dataset")
    paths_doc = dataset_doc.get("paths") or {}
    _check_keys(paths_doc, {"annotations", "gallery", "dir"}, "dataset.paths")
    dataset = DatasetConfig(
        kind=_get(dataset_doc, "kind", str, "synthetic", "dataset"),
        annotations=_resolve(_get(paths_doc, "annotations", str, "", "dataset.paths")),
        gallery=_resolve(_get(paths_doc, "gallery", str, "", "dataset.paths")),
        dir=_resolve(_get(paths_doc, "dir", str, "", "dataset.paths")),
    )

    embedder_doc = doc.get("embedder") or {}
    _check_keys(embedder_doc, {"kind", "base_url", "model_tag"}, "embedder")
    embedder = EmbedderConfig(
        kind=_get(embedder_doc, "kind", str, "hashing", "embedder"),
        base_url=_get(embedder_doc, "base_url", str, "", "embedder"),
        model_tag=_get(embedder_doc, "model_tag", str, "", "embedder"),
    )

    workers_doc = doc.get("workers") or {}
    _check_keys(workers_doc, {"top_n"}, "workers")
    runner_doc = doc.get("runner") or {}
    _check_keys(runner_doc, {"workers"}, "runner")
    prompts_doc = doc.get("prompts") or {}
    _check_keys(prompts_doc, {"dir"}, "prompts")

    return EngineConfig(
        seed=_get(doc, "seed", int, 0, ""),
        embeddings=_resolve(_get(doc, "embeddings", str, "", "")),
        proxies=_resolve(_get(doc, "proxies", str, "", "")),
        fusion=fusion,
        deliberation=deliberation,
        experience_path=experience_path,
        llm=llm,
        dataset=dataset,
        embedder=embedder,
        workers_top_n=_get(workers_doc, "top_n", int, 200, "workers"),
        runner_workers=_get(runner_doc, "workers", int, 4, "runner"),
        prompts_dir=_resolve(_get(prompts_doc, "dir", str, "", "prompts")),
    )


def load_config(path: str | Path) -> EngineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file does not exist: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(doc, base_dir=path.parent)


def config_summary(cfg: EngineConfig) -> dict[str, Any]:
    """The key facts embedded into run reports."""
    return {
        "seed": cfg.seed,
        "fusion": {
            "mode": cfg.fusion.mode,
            "tau": cfg.fusion.tau,
            "k": cfg.fusion.k,
            "static_weights": list(cfg.fusion.static_weights.as_tuple()),
        },
        "deliberation": {
            "L": cfg.deliberation.stages,
            "strategy_override": cfg.deliberation.strategy_override,
        },
        "dataset_kind": cfg.dataset.kind,
        "workers_top_n": cfg.workers_top_n,
    }

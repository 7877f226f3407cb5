"""Offline distillation of screening heuristics into a bounded library.

Sandbox instances are page-screening tasks with a known answer set
(possibly the next_page sentinel). A group of reasoning rollouts is
scored per instance, the best and worst are contrasted by a distiller
LLM into short imperative heuristics, and a merge operator folds them
into the library with dedup, score-floor pruning, and capacity eviction.
The persisted library is read-only at inference time.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Literal, Mapping, Optional, Protocol, Sequence

from . import prompts
from .gateway import (
    LlmGateway,
    LlmRequest,
    MalformedStructuredReply,
    ProviderError,
    parse_structured,
)
from .router import CandidateBuffer

log = logging.getLogger(__name__)

NEXT_PAGE = "next_page"

Paradigm = Literal["intra_page_truth", "cross_page_rejection", "counterfactual_defense"]
PARADIGMS: tuple[str, ...] = (
    "intra_page_truth",
    "cross_page_rejection",
    "counterfactual_defense",
)

DEFAULT_LAMBDA = 0.2
DEFAULT_CAPACITY = 64
SCORE_FLOOR = 0.05
MAX_HEURISTIC_CHARS = 300
MAX_PAGE_CANDIDATES = 25


class InsufficientCandidates(RuntimeError):
    """A buffer is too short to build the requested sandbox page."""


@dataclass(frozen=True)
class SandboxInstance:
    """One offline screening task with its gold answer set."""

    ref_proxy: str
    mod_text: str
    target_hypothesis: str
    candidates: tuple[tuple[str, str], ...]
    answer_set: frozenset[str]
    paradigm: Paradigm

    def __post_init__(self) -> None:
        object.__setattr__(self, "answer_set", frozenset(self.answer_set))
        if not self.candidates:
            raise ValueError("sandbox instance needs at least one candidate")
        if len(self.candidates) > MAX_PAGE_CANDIDATES:
            raise ValueError(
                f"sandbox page limited to {MAX_PAGE_CANDIDATES} candidates, got {len(self.candidates)}"
            )
        if not self.answer_set:
            raise ValueError("answer set must be non-empty")
        ids = {i for i, _ in self.candidates}
        has_sentinel = NEXT_PAGE in self.answer_set
        real = self.answer_set - {NEXT_PAGE}
        if has_sentinel and real:
            raise ValueError("next_page excludes candidate answers")
        if not has_sentinel and not real:
            raise ValueError("answer set needs candidate ids or the sentinel")
        stray = sorted(real - ids)
        if stray:
            raise ValueError(f"answers not on the page: {stray}")
        if self.paradigm == "cross_page_rejection" and self.answer_set != {NEXT_PAGE}:
            raise ValueError("cross-page instances must answer next_page")


@dataclass(frozen=True)
class Rollout:
    """One reasoning attempt with its scored components."""

    think: str
    answer: frozenset[str]
    reward: float
    answer_reward: float
    logical_score: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "answer", frozenset(self.answer))


def normalize_key(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip().lower())


@dataclass(frozen=True)
class ExperienceItem:
    id: str
    text: str
    score: float
    paradigm: str
    created_at: int = 0

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("heuristic text must be non-empty")
        if len(self.text) > MAX_HEURISTIC_CHARS:
            raise ValueError(f"heuristic text exceeds {MAX_HEURISTIC_CHARS} characters")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must lie in [0, 1], got {self.score}")

    @property
    def normalized_key(self) -> str:
        return normalize_key(self.text)


@dataclass(frozen=True)
class ExperienceLibrary:
    """Bounded, deduplicated heuristic store; replaced, never mutated."""

    items: tuple[ExperienceItem, ...] = ()
    capacity: int = DEFAULT_CAPACITY
    version: int = 0

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if len(self.items) > self.capacity:
            raise ValueError(f"{len(self.items)} items exceed capacity {self.capacity}")
        keys = [item.normalized_key for item in self.items]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate normalized keys in library")

    def top_texts(self, n: int) -> list[str]:
        ordered = sorted(self.items, key=lambda i: (-i.score, i.created_at, i.id))
        return [item.text for item in ordered[:n]]

    def __len__(self) -> int:
        return len(self.items)


def set_f1(a: Iterable[str], b: Iterable[str]) -> float:
    """Set F1; the next_page sentinel counts as a regular element."""
    sa, sb = set(a), set(b)
    denom = len(sa) + len(sb)
    if denom == 0:
        return 0.0
    return 2.0 * len(sa & sb) / denom


class LogicJudge(Protocol):
    """Scores the rigor of a reasoning chain in [0, 1]."""

    def __call__(self, think: str) -> float: ...


def gateway_logic_judge(gateway: LlmGateway, template_dir: Optional[str] = None) -> LogicJudge:
    """A LogicJudge backed by the logic_judge provider role."""

    def judge(think: str) -> float:
        prompt = prompts.render(
            prompts.load_template("logic_judge", template_dir), think=think or "(empty)"
        )
        reply = gateway.complete(LlmRequest(role="logic_judge", prompt=prompt, structured=True))
        return float(parse_structured(reply, "score"))

    return judge


def reward_rollout(
    rollout_answer: Iterable[str],
    answer_set: Iterable[str],
    think: str,
    lam: float,
    judge: Optional[LogicJudge],
) -> float:
    """Answer-consistency reward plus a weighted logical-rigor score.

    A judge failure zeroes the logical component with a warning rather
    than failing the rollout.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    consistency = set_f1(rollout_answer, answer_set)
    logical = 0.0
    if judge is not None and lam > 0:
        try:
            logical = min(1.0, max(0.0, float(judge(think))))
        except Exception as exc:
            log.warning("logic judge failed (%s); logical component set to 0", exc)
            logical = 0.0
    return consistency + lam * logical


def _instance_prompt(instance: SandboxInstance, template_dir: Optional[str]) -> str:
    query_text = prompts.format_query(
        instance.ref_proxy, instance.mod_text, instance.target_hypothesis
    )
    return prompts.render(
        prompts.load_template("de_judge", template_dir),
        query=query_text,
        candidates=prompts.format_candidates(instance.candidates),
        leading=prompts.format_leading(None),
        experience=prompts.format_experience([]),
        mode="pick_many",
    )


def generate_rollouts(
    instance: SandboxInstance,
    group_size: int,
    gateway: LlmGateway,
    *,
    lam: float = DEFAULT_LAMBDA,
    judge: Optional[LogicJudge] = None,
    template_dir: Optional[str] = None,
) -> list[Rollout]:
    """Sample a group of reasoning rollouts for one sandbox instance.

    Each attempt carries a distinct sample tag so deterministic providers
    still produce a diverse group; sampling providers simply ignore it.
    Answers are scored as given, off-page picks included, so wrong ids
    cost reward honestly.
    """
    if group_size < 2:
        raise ValueError("group_size must be >= 2")
    base = _instance_prompt(instance, template_dir)
    rollouts: list[Rollout] = []
    for z in range(1, group_size + 1):
        request = LlmRequest(
            role="de_judge", prompt=f"{base}\n\n(sample tag {z})", structured=True
        )
        reply = gateway.complete(request)
        try:
            decision = parse_structured(reply, "page_decision")
            think = decision["rationale"]
            answer = frozenset(decision["selected"]) if decision["selected"] else frozenset({NEXT_PAGE})
            if decision["selected"] and decision["next_page"]:  # pragma: no cover
                answer = frozenset(decision["selected"])
        except MalformedStructuredReply:
            think = reply.text
            answer = frozenset()
        consistency = set_f1(answer, instance.answer_set)
        logical = 0.0
        if judge is not None and lam > 0:
            try:
                logical = min(1.0, max(0.0, float(judge(think))))
            except Exception as exc:
                log.warning("logic judge failed (%s); logical component set to 0", exc)
        rollouts.append(
            Rollout(
                think=think,
                answer=answer,
                reward=consistency + lam * logical,
                answer_reward=consistency,
                logical_score=logical,
            )
        )
    return rollouts


def _heuristic_id(text: str) -> str:
    return "h" + hashlib.sha1(normalize_key(text).encode("utf-8")).hexdigest()[:10]


def distill(
    instance: SandboxInstance,
    rollouts: Sequence[Rollout],
    library: ExperienceLibrary,
    gateway: LlmGateway,
    group_size: int,
    *,
    lam: float = DEFAULT_LAMBDA,
    template_dir: Optional[str] = None,
) -> list[ExperienceItem]:
    """Contrast the best and worst rollouts into candidate heuristics.

    Each candidate is scored by the normalized reward gap
    (r_best - r_worst) / (1 + lambda), clamped to [0, 1]. Distillation is
    best-effort: any provider or parse failure yields an empty list.
    """
    if len(rollouts) != group_size or group_size < 2:
        raise ValueError(f"expected {group_size} >= 2 rollouts, got {len(rollouts)}")
    by_reward = sorted(enumerate(rollouts), key=lambda p: (-p[1].reward, p[0]))
    best = by_reward[0][1]
    worst = by_reward[-1][1]
    gap = (best.reward - worst.reward) / (1.0 + lam)
    score = min(1.0, max(0.0, gap))

    def _describe(r: Rollout) -> str:
        return f"answer: {sorted(r.answer)}\nreasoning: {r.think or '(none)'}"

    prompt = prompts.render(
        prompts.load_template("distiller", template_dir),
        context=prompts.format_query(
            instance.ref_proxy, instance.mod_text, instance.target_hypothesis
        ),
        best=_describe(best),
        best_reward=f"{best.reward:.4f}",
        worst=_describe(worst),
        worst_reward=f"{worst.reward:.4f}",
        experience=prompts.format_experience(item.text for item in library.items),
    )
    request = LlmRequest(role="distiller", prompt=prompt, structured=True)
    try:
        reply = gateway.complete(request)
        texts = parse_structured(reply, "heuristics")
    except (ProviderError, MalformedStructuredReply) as exc:
        log.warning("distillation attempt dropped: %s", exc)
        return []
    items = []
    for text in texts:
        text = text.strip()[:MAX_HEURISTIC_CHARS]
        if not text:
            continue
        items.append(
            ExperienceItem(
                id=_heuristic_id(text),
                text=text,
                score=score,
                paradigm=instance.paradigm,
            )
        )
    return items


def update_library(
    library: ExperienceLibrary, new_items: Sequence[ExperienceItem]
) -> ExperienceLibrary:
    """Merge new heuristics into the library.

    Duplicate keys keep the higher score; items under the score floor are
    dropped; capacity overflow evicts lowest score first, oldest first on
    ties. The version counter always advances.
    """
    merged: dict[str, ExperienceItem] = {i.normalized_key: i for i in library.items}
    next_stamp = max((i.created_at for i in library.items), default=0) + 1
    for item in new_items:
        key = item.normalized_key
        cur = merged.get(key)
        if cur is not None:
            if item.score > cur.score:
                merged[key] = replace(cur, score=item.score)
            continue
        merged[key] = replace(item, created_at=next_stamp)
        next_stamp += 1
    kept = [i for i in merged.values() if i.score >= SCORE_FLOOR]
    if len(kept) > library.capacity:
        kept.sort(key=lambda i: (i.score, -i.created_at), reverse=True)
        kept = kept[: library.capacity]
    kept.sort(key=lambda i: i.created_at)
    return ExperienceLibrary(
        items=tuple(kept), capacity=library.capacity, version=library.version + 1
    )


def library_to_json(library: ExperienceLibrary) -> str:
    doc = {
        "version": library.version,
        "capacity": library.capacity,
        "items": [
            {
                "id": i.id,
                "text": i.text,
                "score": i.score,
                "paradigm": i.paradigm,
                "created_at": i.created_at,
            }
            for i in library.items
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def save_library(library: ExperienceLibrary, path: str | Path) -> None:
    Path(path).write_text(library_to_json(library), encoding="utf-8")


def load_library(path: str | Path) -> ExperienceLibrary:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    items = tuple(
        ExperienceItem(
            id=entry["id"],
            text=entry["text"],
            score=float(entry["score"]),
            paradigm=entry.get("paradigm", ""),
            created_at=int(entry.get("created_at", 0)),
        )
        for entry in doc.get("items", [])
    )
    return ExperienceLibrary(
        items=items,
        capacity=int(doc.get("capacity", DEFAULT_CAPACITY)),
        version=int(doc.get("version", 0)),
    )


class SandboxSource(Protocol):
    """Supplies sandbox instances per paradigm during distillation."""

    def sample(self, paradigm: Paradigm, rng) -> SandboxInstance: ...


@dataclass
class SandboxPool:
    """A prebuilt pool of instances, sampled with replacement."""

    instances: Mapping[str, Sequence[SandboxInstance]]

    def sample(self, paradigm: Paradigm, rng) -> SandboxInstance:
        pool = self.instances.get(paradigm) or ()
        if not pool:
            raise InsufficientCandidates(f"no sandbox instances for paradigm {paradigm!r}")
        return pool[rng.randrange(len(pool))]


def build_sandbox(
    dataset: Sequence,
    buffers: Mapping[str, "CandidateBuffer"],
    paradigm: Paradigm,
    count: int,
    *,
    proxies: Mapping[str, str],
    hypotheses: Optional[Mapping[str, str]] = None,
    attributes: Optional[Mapping[str, tuple]] = None,
    page_size: int = MAX_PAGE_CANDIDATES,
    rng=None,
) -> list[SandboxInstance]:
    """Build ``count`` sandbox instances under one sampling paradigm.

    dataset entries need query_id/ref_image/mod_text/targets fields and a
    buffer per query. Counterfactual pages additionally require per-image
    attribute tuples so near-duplicate distractors can be verified.
    """
    import random as _random

    rng = rng or _random.Random(0)
    if count < 0:
        raise ValueError("count must be >= 0")
    eligible = [
        r for r in dataset
        if r.targets and r.query_id in buffers and len(buffers[r.query_id].ids) > 0
    ]
    if not eligible and count:
        raise InsufficientCandidates("no labeled queries with buffers available")
    instances: list[SandboxInstance] = []
    attempts = 0
    while len(instances) < count:
        attempts += 1
        if attempts > 20 * count + 20:
            raise InsufficientCandidates(
                f"could not build {count} {paradigm} instances from the given buffers"
            )
        record = eligible[rng.randrange(len(eligible))]
        buffer_ids = list(buffers[record.query_id].ids)
        target = sorted(record.targets)[rng.randrange(len(record.targets))]
        ref_proxy = proxies[record.ref_image]
        hypothesis = (hypotheses or {}).get(
            record.query_id, f"{ref_proxy}; {record.mod_text}"
        )
        non_targets = [i for i in buffer_ids if i not in record.targets]

        if paradigm == "intra_page_truth":
            if len(non_targets) < page_size - 1:
                raise InsufficientCandidates(
                    f"buffer for {record.query_id!r} too short for page size {page_size}"
                )
            fillers = rng.sample(non_targets, page_size - 1)
            position = rng.randrange(page_size)
            page = fillers[:position] + [target] + fillers[position:]
            answers = {target}
        elif paradigm == "cross_page_rejection":
            if len(non_targets) < page_size:
                raise InsufficientCandidates(
                    f"buffer for {record.query_id!r} has too few non-targets for page size {page_size}"
                )
            page = rng.sample(non_targets, page_size)
            answers = {NEXT_PAGE}
        elif paradigm == "counterfactual_defense":
            if attributes is None:
                raise ValueError("counterfactual paradigm requires attribute metadata")
            target_attrs = attributes.get(target)
            if target_attrs is None:
                continue
            neighbors = [
                i for i in attributes
                if i != target and _hamming(attributes[i], target_attrs) == 1
            ]
            if len(neighbors) < 3:
                continue
            distractors = rng.sample(sorted(neighbors), min(len(neighbors), page_size - 1))
            fillers = [i for i in non_targets if i not in distractors]
            room = page_size - 1 - len(distractors)
            page = [target] + distractors + (rng.sample(fillers, min(room, len(fillers))) if room > 0 else [])
            rng.shuffle(page)
            answers = {target}
        else:
            raise ValueError(f"unknown paradigm {paradigm!r}")

        missing = [i for i in page if i not in proxies]
        if missing:
            raise LookupError(f"sandbox page needs proxies; missing {missing[:3]}")
        instances.append(
            SandboxInstance(
                ref_proxy=ref_proxy,
                mod_text=record.mod_text,
                target_hypothesis=hypothesis,
                candidates=tuple((i, proxies[i]) for i in page),
                answer_set=frozenset(answers),
                paradigm=paradigm,
            )
        )
    return instances


def _hamming(a: tuple, b: tuple) -> int:
    if len(a) != len(b):
        return max(len(a), len(b))
    return sum(1 for x, y in zip(a, b) if x != y)


@dataclass(frozen=True)
class DistillationConfig:
    rounds: int
    group_size: int = 4
    lam: float = DEFAULT_LAMBDA
    paradigm_mix: tuple[tuple[Paradigm, float], ...] = (
        ("intra_page_truth", 0.5),
        ("cross_page_rejection", 0.3),
        ("counterfactual_defense", 0.2),
    )
    seed: int = 0
    instances_per_round: int = 2
    capacity: int = DEFAULT_CAPACITY

    def __post_init__(self) -> None:
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not self.paradigm_mix or any(w < 0 for _, w in self.paradigm_mix):
            raise ValueError("paradigm mix must be non-empty with non-negative weights")


def run_distillation(
    source: SandboxSource,
    gateway: LlmGateway,
    config: DistillationConfig,
    *,
    out_path: Optional[str | Path] = None,
    judge: Optional[LogicJudge] = None,
    template_dir: Optional[str] = None,
    on_round: Optional[Callable[[dict], None]] = None,
) -> ExperienceLibrary:
    """Run the full distillation loop and persist the resulting library.

    Rounds are sequential because each update conditions the next; a
    provider exhaustion aborts cleanly after persisting the latest
    library state.
    """
    import random as _random

    rng = _random.Random(config.seed)
    library = ExperienceLibrary(capacity=config.capacity)
    names = [p for p, _ in config.paradigm_mix]
    weights = [w for _, w in config.paradigm_mix]
    try:
        for round_index in range(config.rounds):
            new_items: list[ExperienceItem] = []
            rewards: list[float] = []
            for _ in range(config.instances_per_round):
                paradigm = rng.choices(names, weights=weights)[0]
                instance = source.sample(paradigm, rng)
                rollouts = generate_rollouts(
                    instance, config.group_size, gateway,
                    lam=config.lam, judge=judge, template_dir=template_dir,
                )
                rewards.extend(r.reward for r in rollouts)
                new_items.extend(
                    distill(
                        instance, rollouts, library, gateway, config.group_size,
                        lam=config.lam, template_dir=template_dir,
                    )
                )
            library = update_library(library, new_items)
            stats = {
                "round": round_index + 1,
                "mean_reward": sum(rewards) / len(rewards) if rewards else 0.0,
                "library_size": len(library),
            }
            log.info(
                "distillation round %d: mean reward %.4f, library size %d",
                stats["round"], stats["mean_reward"], stats["library_size"],
            )
            if on_round:
                on_round(stats)
    except ProviderError as exc:
        log.warning("distillation aborted on provider failure: %s", exc)
        if out_path is not None:
            save_library(library, out_path)
        raise
    if out_path is not None:
        save_library(library, out_path)
    return library

"""Seeded synthetic attribute benchmark with ground-truth-aware providers.

Gallery items are unique attribute tuples; embeddings are normalized
multi-hot attribute encodings plus Gaussian noise; each query changes a
few attributes of a reference item, and the target is the gallery item
carrying the modified tuple. Proxies are templated attribute sentences,
so an oracle text embedder can map any generated text back onto the same
encoding.

When an intent mix is given, each query is typed pred/key/vis: the
on-type worker signal stays informative (though deliberately lossy) and
the off-type signals are corrupted to describe the unmodified reference,
which drags them toward reference-like decoys. That gives the intent
router something real to route and makes fusion-mode comparisons
meaningful. Oracle providers (including a calibrated noisy judge whose
per-page error grows with page size) exist only for this harness and are
never selectable in production configs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .datasets import DatasetBundle, TripletRecord
from .domain import SemanticProxy
from .embedstore import EmbeddingMatrix, load_embv1, write_embv1
from .gateway import LlmReply, LlmRequest, MockProvider, ProviderError, fallback_token_count

log = logging.getLogger(__name__)

SLOT_NAMES = ("color", "shape", "size", "material", "background", "style", "pattern", "mood")
SLOT_POOLS: dict[str, tuple[str, ...]] = {
    "color": ("red", "blue", "green", "yellow", "purple", "orange"),
    "shape": ("round", "square", "angular", "slender", "bulky", "twisted"),
    "size": ("tiny", "small", "medium", "large", "huge", "colossal"),
    "material": ("wooden", "metallic", "plastic", "fabric", "glassy", "stony"),
    "background": ("beach", "forest", "street", "indoor", "desert", "snowfield"),
    "style": ("vintage", "modern", "rustic", "minimal", "ornate", "sporty"),
    "pattern": ("striped", "dotted", "plain", "checked", "floral", "swirly"),
    "mood": ("cheerful", "gloomy", "calm", "dramatic", "cozy", "eerie"),
}

QUERY_TYPES = ("pred", "key", "vis")
# Weight vectors the oracle router emits per intent type. The dominant
# branch gets most of the mass; the visual anchor keeps a real share on
# text-driven intents because it discriminates look-alike decoys.
TYPE_WEIGHTS: dict[str, tuple[float, float, float]] = {
    "balanced": (1 / 3, 1 / 3, 1 / 3),
    "pred": (0.65, 0.05, 0.30),
    "key": (0.05, 0.65, 0.30),
    "vis": (0.10, 0.10, 0.80),
}

_MOD_TEMPLATES = (
    "change the {slot} to {value}",
    "make the {slot} {value}",
    "turn the {slot} into {value}",
    "set the {slot} to {value}",
)

_WORD = re.compile(r"[a-z0-9_]+")


class Unsatisfiable(RuntimeError):
    """A query or gallery constraint could not be met within the retry cap."""


def proxy_text(slots: tuple[str, ...], values: tuple[str, ...]) -> str:
    return ", ".join(f"{s} {v}" for s, v in zip(slots, values))


class AttributeTextEmbedder:
    """Oracle embedder: attribute value words map onto their one-hot dims."""

    def __init__(self, slots: tuple[str, ...], pools: Mapping[str, tuple[str, ...]]):
        self.slots = slots
        self.dim = sum(len(pools[s]) for s in slots)
        self._index: dict[str, int] = {}
        offset = 0
        for slot in slots:
            for value in pools[slot]:
                self._index[value] = offset
                offset += 1

    def encode_values(self, values: tuple[str, ...]) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for value in values:
            vec[self._index[value]] = 1.0
        return vec

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for token in _WORD.findall(text.lower()):
            idx = self._index.get(token)
            if idx is not None:
                vec[idx] += 1.0
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            vec[0] = 1.0
            return vec
        return vec / norm


@dataclass
class SyntheticBenchmark:
    bundle: DatasetBundle
    store: EmbeddingMatrix
    proxies: dict[str, SemanticProxy]
    meta: dict

    @property
    def attributes(self) -> dict[str, tuple[str, ...]]:
        return self.bundle.extras["attributes"]

    @property
    def query_meta(self) -> dict[str, dict]:
        return self.bundle.extras["query_meta"]

    def embedder(self) -> AttributeTextEmbedder:
        return AttributeTextEmbedder(
            tuple(self.meta["slots"]), {s: tuple(v) for s, v in self.meta["pools"].items()}
        )

    def oracle_providers(self, *, judge_epsilon: float = 0.0, seed: int = 0) -> dict[str, object]:
        """Provider map for the oracle tier; distiller/logic stay mocked."""
        return {
            "si_worker": OracleWorkerProvider(self),
            "cp_worker": OracleWorkerProvider(self),
            "ir_router": OracleRouterProvider(self),
            "de_judge": OracleJudgeProvider(self, epsilon=judge_epsilon, seed=seed),
            "distiller": MockProvider(seed),
            "logic_judge": MockProvider(seed),
        }

    def write_to(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "meta.json").write_text(
            json.dumps(self.meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        gallery_lines = [
            json.dumps(
                {"id": i, "attrs": dict(zip(self.meta["slots"], self.attributes[i]))},
                sort_keys=True,
            )
            for i in self.bundle.gallery
        ]
        (out / "gallery.jsonl").write_text("\n".join(gallery_lines) + "\n", encoding="utf-8")
        query_lines = []
        for record in self.bundle.records:
            meta = self.query_meta[record.query_id]
            query_lines.append(
                json.dumps(
                    {
                        "query_id": record.query_id,
                        "ref": record.ref_image,
                        "mod": record.mod_text,
                        "targets": sorted(record.targets),
                        "split": record.split,
                        **meta,
                    },
                    sort_keys=True,
                )
            )
        (out / "queries.jsonl").write_text("\n".join(query_lines) + "\n", encoding="utf-8")
        proxy_lines = [
            json.dumps(
                {"image_id": p.image, "text": p.text, "source": p.source}, sort_keys=True
            )
            for p in self.proxies.values()
        ]
        (out / "proxies.jsonl").write_text("\n".join(proxy_lines) + "\n", encoding="utf-8")
        write_embv1(out / "embeddings.embv1", list(self.store.ids), self.store.vectors)


def gen_synthetic(
    seed: int,
    n_gallery: int = 200,
    n_queries: int = 50,
    n_attrs: int = 5,
    noise: float = 0.05,
    *,
    intent_mix: Optional[Mapping[str, float]] = None,
    counterfactual_stride: int = 3,
) -> SyntheticBenchmark:
    """Generate a seeded benchmark; byte-identical output per seed.

    ``intent_mix`` maps query types (pred/key/vis) to sampling weights;
    when omitted, every query keeps clean worker signals. Every
    ``counterfactual_stride``-th query gets three near-duplicate
    distractors (attribute Hamming distance 1 from the target).
    """
    if n_attrs < 3 or n_attrs > len(SLOT_NAMES):
        raise ValueError(f"n_attrs must be in 3..{len(SLOT_NAMES)}, got {n_attrs}")
    if n_gallery < n_queries:
        raise ValueError("n_gallery must be >= n_queries")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    slots = SLOT_NAMES[:n_attrs]
    pools = {s: SLOT_POOLS[s] for s in slots}
    space = math.prod(len(pools[s]) for s in slots)
    if n_gallery > space:
        raise Unsatisfiable(f"gallery of {n_gallery} exceeds the {space} distinct tuples")
    if intent_mix is not None:
        bad = sorted(set(intent_mix) - set(QUERY_TYPES))
        if bad:
            raise ValueError(f"unknown intent types {bad}")
        if sum(intent_mix.values()) <= 0:
            raise ValueError("intent mix weights must sum to a positive value")

    rng = random.Random(seed)
    interned: dict[tuple[str, ...], int] = {}

    def intern(t: tuple[str, ...]) -> int:
        if t not in interned:
            interned[t] = len(interned)
        return interned[t]

    def random_tuple() -> tuple[str, ...]:
        return tuple(rng.choice(pools[s]) for s in slots)

    def fresh_tuple() -> tuple[str, ...]:
        for _ in range(2000):
            t = random_tuple()
            if t not in interned:
                return t
        raise Unsatisfiable("could not draw a fresh attribute tuple")

    mix_types = list(intent_mix) if intent_mix else []
    mix_weights = [intent_mix[t] for t in mix_types] if intent_mix else []
    used_mods: list[str] = []
    planned: list[dict] = []

    for qi in range(n_queries):
        qtype = (
            rng.choices(mix_types, weights=mix_weights)[0] if intent_mix else "balanced"
        )
        for _attempt in range(60):
            target_t = fresh_tuple()
            # vis queries stay one step from the reference; typed pred/key
            # queries move min(3, n_attrs - 2) steps so the off-type branches
            # are misleading rather than redundant
            if qtype == "vis":
                n_delta = 1
            elif qtype in ("pred", "key"):
                n_delta = min(3, n_attrs - 2)
            else:
                n_delta = 1 if rng.random() < 0.7 else 2
            delta_positions = sorted(rng.sample(range(n_attrs), n_delta))
            ref_list = list(target_t)
            for pos in delta_positions:
                slot = slots[pos]
                ref_list[pos] = rng.choice(
                    [v for v in pools[slot] if v != target_t[pos]]
                )
            ref_t = tuple(ref_list)
            phrases = [
                _MOD_TEMPLATES[rng.randrange(len(_MOD_TEMPLATES))].format(
                    slot=slots[pos], value=target_t[pos]
                )
                for pos in delta_positions
            ]
            mod_text = " and ".join(phrases)
            if qtype == "vis":
                mod_text = "keep the overall look but " + mod_text
            if any(mod_text in m or m in mod_text for m in used_mods):
                continue
            break
        else:
            raise Unsatisfiable(f"could not place query {qi} uniquely within the retry cap")
        intern(target_t)
        intern(ref_t)
        used_mods.append(mod_text)
        planned.append(
            {
                "qi": qi,
                "type": qtype,
                "target_t": target_t,
                "ref_t": ref_t,
                "delta_positions": delta_positions,
                "mod": mod_text,
            }
        )

        if qi % counterfactual_stride == 0:
            for j in range(3):
                pos = (qi + j) % n_attrs
                slot = slots[pos]
                wrong = rng.choice([v for v in pools[slot] if v != target_t[pos]])
                neighbor = tuple(
                    wrong if p == pos else target_t[p] for p in range(n_attrs)
                )
                intern(neighbor)

    if len(interned) > n_gallery:
        raise Unsatisfiable(
            f"queries and distractors need {len(interned)} gallery items; "
            f"raise n_gallery above {len(interned)}"
        )
    while len(interned) < n_gallery:
        intern(fresh_tuple())

    ordered = sorted(interned.items(), key=lambda kv: kv[1])
    width = max(4, len(str(n_gallery - 1)))
    ids = [f"g{index:0{width}d}" for _, index in ordered]
    tuples = [t for t, _ in ordered]
    id_of = {t: ids[i] for i, (t, _) in enumerate(ordered)}
    attributes = {ids[i]: tuples[i] for i in range(len(ids))}

    embedder = AttributeTextEmbedder(slots, pools)
    noise_rng = np.random.default_rng(seed)
    raw = np.stack([embedder.encode_values(t) for t in tuples])
    if noise > 0:
        raw = raw + noise * noise_rng.standard_normal(raw.shape)
    store = EmbeddingMatrix.from_arrays(ids, raw.astype(np.float32), normalize=True)

    proxies = {
        image_id: SemanticProxy(image=image_id, text=proxy_text(slots, attributes[image_id]))
        for image_id in ids
    }

    records: list[TripletRecord] = []
    query_meta: dict[str, dict] = {}
    for plan in planned:
        qtype = plan["type"]
        target_t, ref_t = plan["target_t"], plan["ref_t"]
        si_clean = qtype in ("balanced", "pred")
        cp_clean = qtype in ("balanced", "key")
        if si_clean and qtype == "balanced":
            si_reply = proxy_text(slots, target_t)
        elif si_clean:
            # typed benchmarks keep the clean hypothesis lossy: it describes
            # only the changed attributes, so it full-matches the target and
            # a handful of look-alikes. The fused head stays imperfect and
            # deliberation has real work to do.
            si_reply = ", ".join(
                f"{slots[p]} {target_t[p]}" for p in plan["delta_positions"]
            )
        else:
            # a corrupted imagination ignores the instruction and describes
            # the reference itself, which drags retrieval toward
            # reference-like distractors
            si_reply = proxy_text(slots, ref_t)
        cp_pairs = [[slots[pos], target_t[pos]] for pos in plan["delta_positions"]]
        if not cp_clean:
            # corrupted constraints assert the pre-modification values
            cp_pairs = [[slots[pos], ref_t[pos]] for pos in plan["delta_positions"]]
        query_id = f"q{plan['qi']:03d}"
        records.append(
            TripletRecord(
                query_id=query_id,
                ref_image=id_of[ref_t],
                mod_text=plan["mod"],
                targets=frozenset({id_of[target_t]}),
                split="val",
            )
        )
        query_meta[query_id] = {
            "type": qtype,
            "delta": {slots[pos]: target_t[pos] for pos in plan["delta_positions"]},
            "si_reply": si_reply,
            "cp_pairs": cp_pairs,
        }

    meta = {
        "seed": seed,
        "n_gallery": n_gallery,
        "n_queries": n_queries,
        "n_attrs": n_attrs,
        "noise": noise,
        "intent_mix": dict(intent_mix) if intent_mix else None,
        "counterfactual_stride": counterfactual_stride,
        "slots": list(slots),
        "pools": {s: list(pools[s]) for s in slots},
    }
    bundle = DatasetBundle(
        kind="synthetic",
        records=records,
        gallery=tuple(ids),
        multi_gt=False,
        extras={"attributes": attributes, "query_meta": query_meta},
    )
    return SyntheticBenchmark(bundle=bundle, store=store, proxies=proxies, meta=meta)


def load_synthetic_dir(path: str | Path) -> SyntheticBenchmark:
    """Reconstruct a benchmark from a directory written by ``write_to``."""
    root = Path(path)
    if root.is_file():
        root = root.parent
    meta = json.loads((root / "meta.json").read_text(encoding="utf-8"))
    slots = tuple(meta["slots"])
    attributes: dict[str, tuple[str, ...]] = {}
    gallery: list[str] = []
    for line in (root / "gallery.jsonl").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        gallery.append(obj["id"])
        attributes[obj["id"]] = tuple(obj["attrs"][s] for s in slots)
    records: list[TripletRecord] = []
    query_meta: dict[str, dict] = {}
    for line in (root / "queries.jsonl").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        records.append(
            TripletRecord(
                query_id=obj["query_id"],
                ref_image=obj["ref"],
                mod_text=obj["mod"],
                targets=frozenset(obj["targets"]),
                split=obj.get("split", "val"),
            )
        )
        query_meta[obj["query_id"]] = {
            "type": obj["type"],
            "delta": obj["delta"],
            "si_reply": obj["si_reply"],
            "cp_pairs": obj["cp_pairs"],
        }
    from .datasets import load_proxies

    proxies = load_proxies(root / "proxies.jsonl")
    store = load_embv1(root / "embeddings.embv1")
    bundle = DatasetBundle(
        kind="synthetic",
        records=records,
        gallery=tuple(gallery),
        multi_gt=False,
        extras={"attributes": attributes, "query_meta": query_meta},
    )
    return SyntheticBenchmark(bundle=bundle, store=store, proxies=proxies, meta=meta)


class _QueryIndex:
    """Find the query a prompt is about by its embedded modification text.

    Longest match wins, which disambiguates texts that extend another
    query's text.
    """

    def __init__(self, bench: SyntheticBenchmark):
        self._by_len = sorted(
            bench.bundle.records, key=lambda r: len(r.mod_text), reverse=True
        )

    def find(self, prompt: str) -> TripletRecord:
        for record in self._by_len:
            if record.mod_text in prompt:
                return record
        raise ProviderError("oracle provider could not identify the query in the prompt")


def _reply(text: str, provider: str) -> LlmReply:
    return LlmReply(
        text=text, tokens_out=fallback_token_count(text), provider=provider, latency_ms=0
    )


class OracleWorkerProvider:
    """Emits the generation-time worker signals (clean or corrupted)."""

    def __init__(self, bench: SyntheticBenchmark):
        self._bench = bench
        self._index = _QueryIndex(bench)
        self.name = "oracle-worker"

    def complete(self, request: LlmRequest) -> LlmReply:
        record = self._index.find(request.prompt)
        meta = self._bench.query_meta[record.query_id]
        if request.role == "si_worker":
            return _reply(meta["si_reply"], self.name)
        if request.role == "cp_worker":
            constraints = [
                {"object": obj, "attribute": attr} for obj, attr in meta["cp_pairs"]
            ]
            return _reply(json.dumps({"constraints": constraints}), self.name)
        raise ProviderError(f"oracle worker does not serve role {request.role!r}")


class OracleRouterProvider:
    """Returns the weight vector matching the query's generated intent type."""

    def __init__(self, bench: SyntheticBenchmark):
        self._bench = bench
        self._index = _QueryIndex(bench)
        self.name = "oracle-router"

    def complete(self, request: LlmRequest) -> LlmReply:
        record = self._index.find(request.prompt)
        qtype = self._bench.query_meta[record.query_id]["type"]
        weights = TYPE_WEIGHTS[qtype]
        return _reply(json.dumps({"weights": list(weights)}), self.name)


class OracleJudgeProvider:
    """Ground-truth-aware page judge with a calibrated error rate.

    With ``epsilon`` > 0 the per-page error probability is
    1 - (1 - epsilon)^((page_size / 25)^2): a standard 25-item page errs
    at exactly epsilon, and longer decision windows degrade superlinearly
    the way context overload degrades a real judge. Errors split between
    a spurious next_page and promoting a wrong candidate. The rationale
    lists the scanned ids, so output tokens track page size.
    """

    def __init__(self, bench: SyntheticBenchmark, *, epsilon: float = 0.0, seed: int = 0):
        if not (0.0 <= epsilon < 1.0):
            raise ValueError("epsilon must lie in [0, 1)")
        self._bench = bench
        self._index = _QueryIndex(bench)
        self.epsilon = epsilon
        self.seed = seed
        self.name = f"oracle-judge(eps={epsilon})"

    def _page_ids(self, prompt: str) -> list[str]:
        ids = []
        for line in prompt.splitlines():
            line = line.strip()
            if line.startswith("[") and " id=" in line and " :: " in line:
                ids.append(line.split(" id=", 1)[1].split(" :: ", 1)[0].strip())
        return ids

    def complete(self, request: LlmRequest) -> LlmReply:
        record = self._index.find(request.prompt)
        page = self._page_ids(request.prompt)
        if not page:
            raise ProviderError("oracle judge found no candidates in the prompt")
        hits = [i for i in page if i in record.targets]
        rationale = f"scanned {len(page)} candidates: " + " ".join(page)

        selected = hits
        if self.epsilon > 0.0:
            # The error stream is keyed on stable query/stage features, not
            # the raw prompt, so runs that differ only in buffer composition
            # share their luck (common random numbers).
            has_leading = "Leading candidate from the previous stage" in request.prompt
            tag_match = re.search(r"\(sample tag (\d+)\)", request.prompt)
            tag = tag_match.group(1) if tag_match else ""
            key = f"{self.seed}|judge|{record.mod_text}|{len(page)}|{int(has_leading)}|{tag}"
            digest = hashlib.sha256(key.encode("utf-8")).digest()
            draw = int.from_bytes(digest[:8], "little") / 2**64
            p_err = 1.0 - (1.0 - self.epsilon) ** ((len(page) / 25.0) ** 2)
            if draw < p_err:
                # An overloaded judge usually under-selects; when a leading
                # candidate is present it anchors on it (next_page) far more
                # often than it promotes a spurious candidate.
                wrongpick_odds = 0.2 if has_leading else 0.5
                wrongs = [i for i in page if i not in record.targets]
                if digest[8] / 255.0 >= wrongpick_odds or not wrongs:
                    selected = []
                else:
                    selected = [wrongs[digest[9] % len(wrongs)]]
        body = {
            "selected": selected,
            "next_page": not selected,
            "rationale": rationale,
        }
        return _reply(json.dumps(body), self.name)

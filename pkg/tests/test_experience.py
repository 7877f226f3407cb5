import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cirengine.experience import (
    NEXT_PAGE,
    DistillationConfig,
    ExperienceItem,
    ExperienceLibrary,
    InsufficientCandidates,
    Rollout,
    SandboxInstance,
    SandboxPool,
    build_sandbox,
    distill,
    generate_rollouts,
    load_library,
    reward_rollout,
    run_distillation,
    save_library,
    set_f1,
    update_library,
)
from cirengine.gateway import MockProvider
from conftest import ScriptedProvider, make_gateway


def _item(text, score, created_at=0, paradigm="intra_page_truth"):
    return ExperienceItem(
        id=f"h{abs(hash(text)) % 10_000}", text=text, score=score,
        paradigm=paradigm, created_at=created_at,
    )


def _instance(paradigm="intra_page_truth", answers=("c1",)):
    return SandboxInstance(
        ref_proxy="color red, shape round",
        mod_text="make the color blue",
        target_hypothesis="color blue, shape round",
        candidates=(("c0", "color green"), ("c1", "color blue"), ("c2", "color red")),
        answer_set=frozenset(answers),
        paradigm=paradigm,
    )


def test_reward_exact_match_with_judge():
    total = reward_rollout({"c1"}, {"c1"}, "checked the color", 0.2, lambda think: 0.5)
    assert total == pytest.approx(1.1)


def test_reward_disjoint_answer():
    total = reward_rollout({"c0"}, {"c1"}, "guessed", 0.2, lambda think: 1.0)
    assert total == pytest.approx(0.2)


def test_reward_sentinel_is_a_regular_element():
    assert reward_rollout({NEXT_PAGE}, {NEXT_PAGE}, "", 0.0, None) == pytest.approx(1.0)


def test_reward_judge_failure_zeroes_logical_component(caplog):
    def broken(think):
        raise RuntimeError("judge offline")

    with caplog.at_level("WARNING"):
        total = reward_rollout({"c1"}, {"c1"}, "t", 0.5, broken)
    assert total == pytest.approx(1.0)


def test_reward_is_symmetric_under_relabeling():
    rng = random.Random(4)
    for _ in range(50):
        answers = {f"c{j}" for j in rng.sample(range(10), 3)}
        picked = {f"c{j}" for j in rng.sample(range(10), rng.randrange(0, 4))}
        mapping = {f"c{j}": f"x{j}" for j in range(10)}
        direct = set_f1(picked, answers)
        relabeled = set_f1({mapping[p] for p in picked}, {mapping[a] for a in answers})
        assert direct == pytest.approx(relabeled)


def test_sandbox_invariants():
    with pytest.raises(ValueError):
        _instance(answers=())
    with pytest.raises(ValueError):
        _instance(answers=("c1", NEXT_PAGE))
    with pytest.raises(ValueError):
        _instance(paradigm="cross_page_rejection", answers=("c1",))
    with pytest.raises(ValueError):
        _instance(answers=("offpage",))
    assert _instance(paradigm="cross_page_rejection", answers=(NEXT_PAGE,)).answer_set == {NEXT_PAGE}


def test_distill_score_from_reward_gap():
    rollouts = [
        Rollout(think="good", answer=frozenset({"c1"}), reward=1.1, answer_reward=1.0, logical_score=0.5),
        Rollout(think="poor", answer=frozenset({"c0"}), reward=0.1, answer_reward=0.0, logical_score=0.5),
    ]
    reply = '{"heuristics": ["compare the stated color before answering"]}'
    gateway = make_gateway(ScriptedProvider([reply]))
    items = distill(_instance(), rollouts, ExperienceLibrary(), gateway, 2, lam=0.2)
    assert len(items) == 1
    assert items[0].score == pytest.approx(1.0 / 1.2)
    assert items[0].paradigm == "intra_page_truth"


def test_distill_zero_gap_gives_zero_scores():
    rollouts = [
        Rollout(think="a", answer=frozenset({"c1"}), reward=0.7, answer_reward=0.7, logical_score=0.0),
        Rollout(think="b", answer=frozenset({"c1"}), reward=0.7, answer_reward=0.7, logical_score=0.0),
    ]
    gateway = make_gateway(ScriptedProvider(['{"heuristics": ["anything"]}']))
    items = distill(_instance(), rollouts, ExperienceLibrary(), gateway, 2)
    assert items[0].score == 0.0
    assert len(update_library(ExperienceLibrary(), items)) == 0  # pruned by floor


def test_distill_failure_is_empty_list():
    gateway = make_gateway(ScriptedProvider(["not json", "not json either"]))
    rollouts = [
        Rollout(think="a", answer=frozenset({"c1"}), reward=1.0, answer_reward=1.0, logical_score=0.0),
        Rollout(think="b", answer=frozenset(), reward=0.0, answer_reward=0.0, logical_score=0.0),
    ]
    assert distill(_instance(), rollouts, ExperienceLibrary(), gateway, 2) == []


def test_update_library_duplicate_key_keeps_higher_score():
    base = update_library(ExperienceLibrary(), [_item("Check the color first", 0.8)])
    lower = update_library(base, [_item("check  the color FIRST", 0.3)])
    assert [i.text for i in lower.items] == [i.text for i in base.items]
    assert lower.items[0].score == pytest.approx(0.8)
    assert lower.version == base.version + 1
    higher = update_library(base, [_item("CHECK THE COLOR FIRST", 0.95)])
    assert higher.items[0].score == pytest.approx(0.95)


def test_update_library_eviction_order():
    lib = ExperienceLibrary(capacity=2)
    lib = update_library(lib, [_item("rule a", 0.9), _item("rule b", 0.8), _item("rule c", 0.7)])
    assert sorted(i.score for i in lib.items) == [0.8, 0.9]


def test_update_library_empty_items_bumps_version_only():
    base = update_library(ExperienceLibrary(), [_item("rule a", 0.9)])
    unchanged = update_library(base, [])
    assert unchanged.items == base.items
    assert unchanged.version == base.version + 1


def test_update_library_drops_below_floor():
    lib = update_library(ExperienceLibrary(), [_item("weak rule", 0.01)])
    assert len(lib) == 0


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.tuples(st.integers(0, 25), st.floats(0, 1), st.integers(2, 6)),
        min_size=1,
        max_size=30,
    )
)
def test_update_library_invariants_hold(batches):
    capacity = batches[0][2]
    library = ExperienceLibrary(capacity=capacity)
    for text_idx, score, _ in batches:
        library = update_library(library, [_item(f"rule number {text_idx}", round(score, 3))])
        keys = [i.normalized_key for i in library.items]
        assert len(set(keys)) == len(keys)
        assert len(library) <= capacity
        assert all(0.0 <= i.score <= 1.0 for i in library.items)
        assert all(i.score >= 0.05 for i in library.items)


def test_library_round_trip(tmp_path):
    library = update_library(
        ExperienceLibrary(capacity=8),
        [_item("rule a", 0.9), _item("rule b", 0.5, paradigm="cross_page_rejection")],
    )
    path = tmp_path / "lib.json"
    save_library(library, path)
    again = load_library(path)
    assert again == library


def test_generate_rollouts_vary_and_score():
    instance = _instance()
    gateway = make_gateway(MockProvider(1))
    rollouts = generate_rollouts(instance, 4, gateway, lam=0.0)
    assert len(rollouts) == 4
    assert len({r.think for r in rollouts} | {frozenset(r.answer) for r in rollouts}) > 1
    for r in rollouts:
        assert r.reward == pytest.approx(set_f1(r.answer, instance.answer_set))


class _Rec:
    def __init__(self, query_id, ref, mod, targets):
        self.query_id = query_id
        self.ref_image = ref
        self.mod_text = mod
        self.targets = frozenset(targets)


class _Buf:
    def __init__(self, ids):
        self.ids = tuple(ids)


def _sandbox_fixture():
    ids = [f"g{j}" for j in range(12)]
    proxies = {i: f"proxy {i}" for i in ids + ["ref"]}
    records = [_Rec("q0", "ref", "make the color blue", {"g3"})]
    buffers = {"q0": _Buf(ids)}
    return records, buffers, proxies


def test_build_sandbox_intra_page_positions_vary():
    records, buffers, proxies = _sandbox_fixture()
    rng = random.Random(0)
    instances = build_sandbox(
        records, buffers, "intra_page_truth", 6, proxies=proxies, page_size=5, rng=rng
    )
    positions = set()
    for inst in instances:
        ids = [i for i, _ in inst.candidates]
        assert inst.answer_set == {"g3"}
        positions.add(ids.index("g3"))
    assert len(positions) > 1  # the target moves between pages


def test_build_sandbox_cross_page_answers_sentinel():
    records, buffers, proxies = _sandbox_fixture()
    instances = build_sandbox(
        records, buffers, "cross_page_rejection", 3,
        proxies=proxies, page_size=5, rng=random.Random(1),
    )
    for inst in instances:
        assert inst.answer_set == {NEXT_PAGE}
        assert "g3" not in {i for i, _ in inst.candidates}


def test_build_sandbox_counterfactual_requires_near_duplicates():
    records, buffers, proxies = _sandbox_fixture()
    attributes = {f"g{j}": ("red", "round", "small") for j in range(12)}
    attributes["g3"] = ("blue", "round", "small")
    attributes["g4"] = ("green", "round", "small")
    attributes["g5"] = ("blue", "square", "small")
    attributes["g6"] = ("blue", "round", "large")
    instances = build_sandbox(
        records, buffers, "counterfactual_defense", 2,
        proxies=proxies, attributes=attributes, page_size=6, rng=random.Random(2),
    )
    for inst in instances:
        ids = [i for i, _ in inst.candidates]
        assert "g3" in ids
        near = [
            i for i in ids
            if i != "g3" and sum(a != b for a, b in zip(attributes[i], attributes["g3"])) == 1
        ]
        assert len(near) >= 3


def test_build_sandbox_insufficient_candidates():
    records, buffers, proxies = _sandbox_fixture()
    with pytest.raises(InsufficientCandidates):
        build_sandbox(
            records, buffers, "cross_page_rejection", 1,
            proxies=proxies, page_size=20, rng=random.Random(0),
        )


def _pool():
    records, buffers, proxies = _sandbox_fixture()
    instances = build_sandbox(
        records, buffers, "intra_page_truth", 4, proxies=proxies, page_size=5,
        rng=random.Random(3),
    )
    return SandboxPool({"intra_page_truth": instances})


def test_run_distillation_zero_rounds_persists_empty_library(tmp_path):
    path = tmp_path / "lib.json"
    config = DistillationConfig(rounds=0, seed=1, paradigm_mix=(("intra_page_truth", 1.0),))
    library = run_distillation(_pool(), make_gateway(MockProvider(0)), config, out_path=path)
    assert len(library) == 0
    assert library.version == 0
    assert json.loads(path.read_text())["items"] == []


def test_run_distillation_deterministic_bytes(tmp_path):
    config = DistillationConfig(
        rounds=3, group_size=4, seed=5, paradigm_mix=(("intra_page_truth", 1.0),)
    )
    blobs = []
    for run in range(2):
        path = tmp_path / f"lib{run}.json"
        run_distillation(_pool(), make_gateway(MockProvider(9)), config, out_path=path)
        blobs.append(path.read_bytes())
    assert blobs[0] == blobs[1]


def test_run_distillation_oracle_rollouts_reach_analytic_mean(tmp_path):
    class AlwaysRightJudgeProvider:
        name = "always-right"

        def complete(self, request):
            from cirengine.gateway import LlmReply

            ids = [
                line.split(" id=", 1)[1].split(" :: ", 1)[0]
                for line in request.prompt.splitlines()
                if line.strip().startswith("[") and " id=" in line
            ]
            hits = [i for i in ids if i == "g3"]
            text = json.dumps({"selected": hits, "next_page": not hits, "rationale": "sure"})
            return LlmReply(text=text, tokens_out=3, provider=self.name)

    gateway = make_gateway(AlwaysRightJudgeProvider())
    rounds = []
    config = DistillationConfig(
        rounds=2, group_size=3, lam=0.2, seed=2, paradigm_mix=(("intra_page_truth", 1.0),)
    )
    run_distillation(
        _pool(), gateway, config,
        judge=lambda think: 0.5, on_round=rounds.append,
    )
    for stats in rounds:
        assert stats["mean_reward"] == pytest.approx(1.0 + 0.2 * 0.5)


def test_run_distillation_persists_on_provider_exhaustion(tmp_path):
    class DiesAfter(ScriptedProvider):
        def complete(self, request):
            from cirengine.gateway import TransientError

            if self.calls >= 6:
                raise TransientError("quota burned")
            return super().complete(request)

    provider = DiesAfter([json.dumps({"selected": ["g3"], "next_page": False, "rationale": "r"})])
    gateway = make_gateway(provider, retries=2)
    path = tmp_path / "lib.json"
    config = DistillationConfig(rounds=4, group_size=3, seed=0, paradigm_mix=(("intra_page_truth", 1.0),))
    from cirengine.gateway import Exhausted

    with pytest.raises(Exhausted):
        run_distillation(_pool(), gateway, config, out_path=path)
    assert path.exists()

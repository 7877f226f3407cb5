import random

import pytest

from cirengine.domain import RankedList
from cirengine.router import (
    AllBranchesEmpty,
    CandidateBuffer,
    FusionConfig,
    IntentWeights,
    fuse,
    route_intent,
    split_pages,
    weights_for_mode,
)
from conftest import ScriptedProvider, make_gateway


def _ranked(view, ids, produced_for="q"):
    n = len(ids)
    entries = tuple((i, float(n - pos)) for pos, i in enumerate(ids))
    return RankedList(view=view, entries=entries, produced_for=produced_for)


def _branches(pred, key, vis, produced_for="q"):
    return {
        "pred": _ranked("pred", pred, produced_for),
        "key": _ranked("key", key, produced_for),
        "vis": _ranked("vis", vis, produced_for),
    }


def brute_force_scores(branch_ids, weights, tau):
    """Independent oracle: sum of w / (rank + tau), missing rank = depth + 1."""
    union = set().union(*branch_ids.values())
    scores = {}
    for image_id in union:
        total = 0.0
        for branch, ids in branch_ids.items():
            rank = ids.index(image_id) + 1 if image_id in ids else len(ids) + 1
            total += weights[branch] / (rank + tau)
        scores[image_id] = total
    return scores


def test_worked_fusion_value():
    # r = (1, 3, 10), w = (0.6, 0.3, 0.1), tau = 60:
    # 0.6/61 + 0.3/63 + 0.1/70 = 0.0160265...
    gallery = {f"x{i}" for i in range(10)} | {"t"}
    pred = ["t"] + [f"x{i}" for i in range(9)]
    key = ["x0", "x1", "t"] + [f"x{i}" for i in range(2, 9)]
    vis = [f"x{i}" for i in range(9)] + ["t"]
    buffer = fuse(
        _branches(pred, key, vis),
        IntentWeights(0.6, 0.3, 0.1),
        FusionConfig(tau=60.0, k=11),
        gallery,
    )
    score = dict(buffer.entries)["t"]
    assert score == pytest.approx(0.6 / 61 + 0.3 / 63 + 0.1 / 70, abs=1e-12)
    assert score == pytest.approx(0.0160266, abs=1e-7)


def test_fuse_matches_brute_force_oracle():
    rng = random.Random(60)
    for _ in range(300):
        n = rng.randrange(2, 60)
        gallery = [f"i{j:03d}" for j in range(n)]
        branch_ids = {}
        for branch in ("pred", "key", "vis"):
            depth = rng.randrange(0, n + 1)
            branch_ids[branch] = rng.sample(gallery, depth)
        if not any(branch_ids.values()):
            branch_ids["pred"] = rng.sample(gallery, 1)
        raw = (rng.random(), rng.random(), rng.random())
        weights = IntentWeights.from_raw(raw)
        cfg = FusionConfig(tau=60.0, k=max(2, n))
        buffer = fuse(_branches(**branch_ids), weights, cfg, set(gallery))
        oracle = brute_force_scores(branch_ids, weights.as_mapping(), cfg.tau)
        assert set(buffer.ids) == set(oracle)
        for image_id, score in buffer.entries:
            assert score == pytest.approx(oracle[image_id], abs=1e-12)


def test_single_branch_degeneracy():
    pred = ["a", "b", "c", "d"]
    buffer = fuse(
        _branches(pred, ["d", "c"], ["b", "a"]),
        IntentWeights(1.0, 0.0, 0.0),
        FusionConfig(tau=60.0, k=4),
        {"a", "b", "c", "d"},
    )
    assert list(buffer.ids) == pred


def test_monotonicity_when_rank_improves():
    gallery = {f"i{j}" for j in range(10)}
    base_key = [f"i{j}" for j in range(10)]
    weights = IntentWeights(0.5, 0.3, 0.2)
    cfg = FusionConfig(tau=60.0, k=10)
    target = "i7"
    improved = base_key.copy()
    pos = improved.index(target)
    improved[pos - 1], improved[pos] = improved[pos], improved[pos - 1]
    before = dict(
        fuse(
            _branches(sorted(gallery), base_key, sorted(gallery, reverse=False)),
            weights, cfg, gallery,
        ).entries
    )[target]
    after = dict(
        fuse(
            _branches(sorted(gallery), improved, sorted(gallery, reverse=False)),
            weights, cfg, gallery,
        ).entries
    )[target]
    assert after > before


def test_avg_mode_equals_uniform_weights():
    branches = _branches(["a", "b", "c", "d", "e"], ["b", "a", "e", "c", "d"], ["c", "d", "a", "e", "b"])
    gallery = {"a", "b", "c", "d", "e"}
    cfg = FusionConfig(tau=60.0, k=5, mode="avg")
    weights = weights_for_mode(cfg, "whatever", None)
    assert weights == IntentWeights.uniform()
    by_mode = fuse(branches, weights, cfg, gallery)
    by_hand = fuse(branches, IntentWeights(1 / 3, 1 / 3, 1 / 3), cfg, gallery)
    assert by_mode.entries == by_hand.entries


def test_argmax_invariance_under_weight_scaling():
    rng = random.Random(2)
    gallery = [f"i{j}" for j in range(30)]
    branches = _branches(
        rng.sample(gallery, 20), rng.sample(gallery, 15), rng.sample(gallery, 25)
    )
    cfg = FusionConfig(tau=60.0, k=30)
    raw = (0.2, 0.5, 0.3)
    for c in (1.0, 3.0, 117.0):
        weights = IntentWeights.from_raw(tuple(c * v for v in raw))
        buffer = fuse(branches, weights, cfg, set(gallery))
        assert buffer.ids == fuse(branches, IntentWeights.from_raw(raw), cfg, set(gallery)).ids


def test_buffer_coverage_grows_with_k():
    rng = random.Random(8)
    gallery = [f"i{j}" for j in range(40)]
    branches = _branches(
        rng.sample(gallery, 30), rng.sample(gallery, 30), rng.sample(gallery, 30)
    )
    weights = IntentWeights.uniform()
    previous: set = set()
    for k in (2, 5, 10, 20, 40):
        buffer = fuse(branches, weights, FusionConfig(tau=60.0, k=k), set(gallery))
        assert previous <= set(buffer.ids)
        previous = set(buffer.ids)


def test_all_branches_empty_aborts():
    with pytest.raises(AllBranchesEmpty):
        fuse(_branches([], [], []), IntentWeights.uniform(), FusionConfig(), {"a"})


def test_empty_branch_is_tolerated():
    buffer = fuse(
        _branches(["a", "b"], [], ["b", "a"]),
        IntentWeights.uniform(),
        FusionConfig(tau=60.0, k=2),
        {"a", "b"},
    )
    assert set(buffer.ids) == {"a", "b"}


def test_route_intent_passthrough():
    gateway = make_gateway(ScriptedProvider(['{"weights": [0.5, 0.3, 0.2]}']))
    weights = route_intent("make it blue", gateway)
    assert weights.as_tuple() == pytest.approx((0.5, 0.3, 0.2))


def test_route_intent_clamps_and_renormalizes():
    gateway = make_gateway(ScriptedProvider(['{"weights": [2, 1, 1]}']))
    assert route_intent("m", gateway).as_tuple() == pytest.approx((0.5, 0.25, 0.25))
    gateway = make_gateway(ScriptedProvider(['{"weights": [-1, 1, 1]}']))
    assert route_intent("m", gateway).as_tuple() == pytest.approx((0.0, 0.5, 0.5))


def test_route_intent_fallback_to_uniform():
    gateway = make_gateway(ScriptedProvider(["nope", "still nope"]))
    assert route_intent("m", gateway) == IntentWeights.uniform()

    class DownProvider:
        name = "down"

        def complete(self, request):
            from cirengine.gateway import TransientError

            raise TransientError("offline")

    gateway = make_gateway(DownProvider(), retries=2)
    assert route_intent("m", gateway) == IntentWeights.uniform()


def test_intent_weights_validation():
    with pytest.raises(ValueError):
        IntentWeights(0.5, 0.5, 0.5)
    with pytest.raises(ValueError):
        IntentWeights(-0.1, 0.6, 0.5)
    assert IntentWeights.from_raw((0.0, 0.0, 0.0)) == IntentWeights.uniform()


def test_split_pages_sizes():
    def buffer_of(n):
        entries = tuple((f"i{j:02d}", float(n - j)) for j in range(n))
        return CandidateBuffer(query_id="q", entries=entries, weights_used=IntentWeights.uniform())

    s1, s2 = split_pages(buffer_of(50))
    assert len(s1) == 25 and len(s2) == 25
    s1, s2 = split_pages(buffer_of(7))
    assert len(s1) == 4 and len(s2) == 3
    s1, s2 = split_pages(buffer_of(1))
    assert s1 == ["i00"] and s2 == []
    assert s1 + s2 == [f"i{j:02d}" for j in range(1)]


def test_fusion_config_validation():
    with pytest.raises(ValueError):
        FusionConfig(tau=0.0)
    with pytest.raises(ValueError):
        FusionConfig(k=1)
    with pytest.raises(ValueError):
        FusionConfig(mode="other")

import random
import struct

import numpy as np
import pytest

from cirengine.embedstore import (
    BadMagic,
    DimMismatch,
    DuplicateId,
    EmbeddingMatrix,
    TruncatedFile,
    UnknownImageId,
    ZeroDim,
    load_embv1,
    rank_by_image,
    rank_by_vector,
    write_embv1,
)


def _random_matrix(rng, n=None, dim=None):
    n = n or rng.randrange(1, 12)
    dim = dim or rng.randrange(1, 9)
    vectors = rng_standard(rng, (n, dim))
    ids = [f"img-{i:03d}" for i in range(n)]
    return ids, vectors


def rng_standard(rng, shape):
    flat = [rng.gauss(0, 1) for _ in range(shape[0] * shape[1])]
    return np.array(flat, dtype=np.float32).reshape(shape)


def test_load_normalizes_rows(tmp_path):
    path = tmp_path / "m.embv1"
    write_embv1(path, ["a", "b"], np.array([[1, 0, 0, 0], [0, 2, 0, 0]], dtype=np.float32))
    store = load_embv1(path)
    assert store.dim == 4
    np.testing.assert_allclose(store.vectors[0], [1, 0, 0, 0], atol=1e-6)
    np.testing.assert_allclose(store.vectors[1], [0, 1, 0, 0], atol=1e-6)


def test_duplicate_id_rejected(tmp_path):
    path = tmp_path / "dup.embv1"
    vec = np.ones((1, 2), dtype=np.float32)
    header = struct.pack("<6sIQ", b"EMBV1\x00", 2, 2)
    record = struct.pack("<H", 1) + b"a" + vec[0].tobytes()
    path.write_bytes(header + record + record)
    with pytest.raises(DuplicateId):
        load_embv1(path)


def test_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "bad.embv1"
    path.write_bytes(b"NOTEMB" + b"\x00" * 12)
    with pytest.raises(BadMagic):
        load_embv1(path)
    path.write_bytes(struct.pack("<6sIQ", b"EMBV1\x00", 4, 3) + b"\x00\x01")
    with pytest.raises(TruncatedFile) as err:
        load_embv1(path)
    assert "byte" in str(err.value)


def test_zero_dim_rejected(tmp_path):
    path = tmp_path / "zd.embv1"
    path.write_bytes(struct.pack("<6sIQ", b"EMBV1\x00", 0, 0))
    with pytest.raises(ZeroDim):
        load_embv1(path)


def test_round_trip_reproduces_normalized_vectors(tmp_path):
    rng = random.Random(9)
    for case in range(30):
        ids, vectors = _random_matrix(rng)
        path = tmp_path / f"rt{case}.embv1"
        write_embv1(path, ids, vectors)
        store = load_embv1(path)
        assert store.ids == tuple(ids)
        reference = vectors.astype(np.float64)
        norms = np.linalg.norm(reference, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        reference = reference / norms
        for row, ref_row in zip(store.vectors, reference):
            if np.linalg.norm(ref_row) > 0:
                np.testing.assert_allclose(row, ref_row, atol=1e-6)


def test_second_round_trip_is_bit_exact(tmp_path):
    rng = random.Random(3)
    ids, vectors = _random_matrix(rng, n=8, dim=5)
    first = tmp_path / "a.embv1"
    second = tmp_path / "b.embv1"
    write_embv1(first, ids, vectors)
    store = load_embv1(first)
    write_embv1(second, list(store.ids), store.vectors)
    again = load_embv1(second)
    assert again.ids == store.ids
    assert again.vectors.tobytes() == store.vectors.tobytes()


def test_zero_vector_replaced_with_unit_basis(tmp_path, caplog):
    path = tmp_path / "zero.embv1"
    write_embv1(path, ["z", "y"], np.array([[0, 0, 0], [0, 3, 0]], dtype=np.float32))
    with caplog.at_level("WARNING"):
        store = load_embv1(path)
    np.testing.assert_allclose(store.vectors[0], [1, 0, 0])
    assert any("zero-norm" in r.message for r in caplog.records)


def test_rank_by_vector_one_hot(one_hot_store):
    ranked = rank_by_vector(one_hot_store, np.array([0.0, 1.0, 0.0]), 1)
    assert ranked.entries[0][0] == "b"
    assert ranked.entries[0][1] == pytest.approx(1.0, abs=1e-6)


def test_rank_by_vector_orthogonal_ties_break_by_id():
    ids = ("c", "a", "b")
    vectors = np.array([[1, 0], [1, 0], [1, 0]], dtype=np.float32)
    store = EmbeddingMatrix.from_arrays(ids, vectors)
    ranked = rank_by_vector(store, np.array([0.0, 1.0]), 3)
    assert [i for i, _ in ranked.entries] == ["a", "b", "c"]
    assert all(abs(s) < 1e-6 for _, s in ranked.entries)


def test_rank_by_vector_dim_mismatch(one_hot_store):
    with pytest.raises(DimMismatch):
        rank_by_vector(one_hot_store, np.array([1.0, 0.0]), 2)


def test_rank_by_vector_matches_full_sort_oracle():
    rng = random.Random(17)
    vectors = rng_standard(rng, (50, 6))
    ids = [f"g{i:02d}" for i in range(50)]
    store = EmbeddingMatrix.from_arrays(ids, vectors)
    for trial in range(20):
        query = np.array([rng.gauss(0, 1) for _ in range(6)])
        q = query / np.linalg.norm(query)
        scores = store.vectors @ q
        oracle = sorted(zip(ids, scores), key=lambda p: (-p[1], p[0]))
        ranked = rank_by_vector(store, query, 10)
        assert [i for i, _ in ranked.entries] == [i for i, _ in oracle[:10]]
        for (_, got), (_, want) in zip(ranked.entries, oracle[:10]):
            assert got == pytest.approx(want, abs=1e-9)


def test_rank_by_vector_prefix_property():
    rng = random.Random(5)
    vectors = rng_standard(rng, (30, 4))
    store = EmbeddingMatrix.from_arrays([f"i{i}" for i in range(30)], vectors)
    query = np.array([1.0, -0.5, 0.25, 0.0])
    full = rank_by_vector(store, query, 30)
    assert set(full.ids) == set(store.ids)
    for top_n in (1, 3, 7, 29):
        part = rank_by_vector(store, query, top_n)
        assert part.ids == full.ids[:top_n]
    assert all(-1 - 1e-6 <= s <= 1 + 1e-6 for _, s in full.entries)


def test_rank_by_image_self_similarity(one_hot_store):
    ranked = rank_by_image(one_hot_store, "a", 3)
    assert ranked.entries[0][0] == "a"
    assert ranked.entries[0][1] == pytest.approx(1.0, abs=1e-6)
    assert ranked.view == "vis"


def test_rank_by_image_identical_rows_tie_break():
    vectors = np.array([[1, 1], [1, 1]], dtype=np.float32)
    store = EmbeddingMatrix.from_arrays(("b", "a"), vectors)
    ranked = rank_by_image(store, "a", 2)
    assert [i for i, _ in ranked.entries] == ["a", "b"]


def test_rank_by_image_equals_rank_by_own_row():
    rng = random.Random(11)
    vectors = rng_standard(rng, (20, 5))
    store = EmbeddingMatrix.from_arrays([f"r{i}" for i in range(20)], vectors)
    ranked = rank_by_image(store, "r7", 20)
    direct = rank_by_vector(store, store.row("r7"), 20, view="vis")
    assert ranked.entries == direct.entries


def test_rank_by_image_unknown_id(one_hot_store):
    with pytest.raises(UnknownImageId):
        rank_by_image(one_hot_store, "nope", 1)

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from fdna.similarity import (
    EmbeddingStore, SimilarityError, cosine_distance, distances_to, format_neighbors, load_store,
    nearest_neighbors, save_store,
)

nonneg = arrays(np.float64, 6, elements=st.floats(0, 1e3)).filter(lambda v: v.any())
real = arrays(np.float64, 6, elements=st.floats(-1e3, 1e3)).filter(lambda v: np.dot(v, v) > 1e-6)


def test_cosine_examples():
    assert cosine_distance([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert cosine_distance([1.0, 0.0], [0.0, 3.0]) == 1.0
    assert cosine_distance([1.0, 1.0], [1.0, 0.0]) == pytest.approx(1 - 1 / np.sqrt(2), abs=1e-15)
    assert cosine_distance([1.0, 0.0], [-1.0, 0.0]) == 2.0


def test_cosine_errors():
    with pytest.raises(SimilarityError):
        cosine_distance([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(SimilarityError):
        cosine_distance([1.0], [1.0, 0.0])


@given(real, real)
def test_symmetry(f, g):
    assert cosine_distance(f, g) == cosine_distance(g, f)


@given(real, real, st.floats(1e-3, 1e3))
def test_scale_invariance(f, g, alpha):
    assert cosine_distance(alpha * f, g) == pytest.approx(cosine_distance(f, g), abs=1e-12)


@given(nonneg, nonneg)
def test_nonnegative_range(f, g):
    assert 0.0 <= cosine_distance(f, g) <= 1.0
    assert cosine_distance(f, f) == pytest.approx(0.0, abs=1e-15)


def test_three_item_store_by_hand():
    store = EmbeddingStore(["a", "b", "c"], [[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    res = nearest_neighbors("a", store, 2)
    assert [i for i, _ in res.neighbors] == ["b", "c"]
    np.testing.assert_allclose([d for _, d in res.neighbors], [1 - 1 / np.sqrt(2), 1.0])
    assert [i for i, _ in nearest_neighbors("b", store, 2).neighbors] == ["a", "c"]


def test_duplicate_first_and_two_item_store():
    store = EmbeddingStore(["x", "y", "z"], [[1.0, 2.0], [0.5, 0.1], [2.0, 4.0]])
    assert nearest_neighbors("x", store, 1).neighbors == [("z", 0.0)]
    two = EmbeddingStore(["p", "q"], [[1.0, 0.0], [0.0, 1.0]])
    assert nearest_neighbors("p", two, 1).neighbors == [("q", 1.0)]


def test_k_bounds_and_missing_query():
    store = EmbeddingStore(["p", "q"], [[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(SimilarityError):
        nearest_neighbors("p", store, 2)
    with pytest.raises(SimilarityError):
        nearest_neighbors("r", store, 1)


def test_zero_vectors_never_returned():
    store = EmbeddingStore(["a", "b", "c"], [[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    assert [i for i, _ in nearest_neighbors("a", store, 2).neighbors] == ["c"]


@given(st.integers(0, 10_000), st.integers(1, 9))
def test_scan_matches_brute_force(seed, k):
    rng = np.random.default_rng(seed)
    V = rng.integers(0, 3, size=(10, 3)).astype(float)
    V[V.sum(axis=1) == 0, 0] = 1.0
    ids = [f"id{n}" for n in rng.permutation(10)]
    store = EmbeddingStore(ids, V)
    res = nearest_neighbors(ids[0], store, k)
    brute = sorted(((cosine_distance(V[0], V[n]), ids[n]) for n in range(1, 10)))[:k]
    assert [i for i, _ in res.neighbors] == [i for _, i in brute]
    np.testing.assert_allclose([d for _, d in res.neighbors], [d for d, _ in brute], atol=1e-12)
    dists = [d for _, d in res.neighbors]
    assert dists == sorted(dists)


def test_block_scan_independent_of_block_size():
    rng = np.random.default_rng(0)
    V = rng.random((1000, 8))
    np.testing.assert_array_equal(distances_to(V[3], V, 7), distances_to(V[3], V))


def test_store_roundtrip_and_mmap(tmp_path):
    rng = np.random.default_rng(1)
    store = EmbeddingStore(["a", "bé", "c"], rng.random((3, 4)))
    path = tmp_path / "s.emb"
    save_store(path, store)
    raw = path.read_bytes()
    assert raw[:8] == b"FDNAEMB\x01"
    assert int.from_bytes(raw[8:16], "little") == 3 and int.from_bytes(raw[16:24], "little") == 4
    np.testing.assert_array_equal(np.frombuffer(raw[24:24 + 96], "<f8").reshape(3, 4), store.vectors)
    for mm in (False, True):
        back = load_store(path, mmap=mm)
        assert back.item_ids == store.item_ids
        np.testing.assert_array_equal(np.asarray(back.vectors), store.vectors)
    assert nearest_neighbors("a", load_store(path, mmap=True), 2) == nearest_neighbors("a", store, 2)


def test_store_rejects_bad_input(tmp_path):
    with pytest.raises(SimilarityError):
        EmbeddingStore(["a", "a"], np.ones((2, 2)))
    (tmp_path / "bad").write_bytes(b"NOTASTORE" + bytes(20))
    with pytest.raises(SimilarityError):
        load_store(tmp_path / "bad")


def test_format_neighbors():
    store = EmbeddingStore(["a", "b"], [[1.0, 0.0], [0.0, 1.0]])
    assert format_neighbors([nearest_neighbors("a", store, 1)]) == "query_id\trank\tneighbor_id\tdistance\na\t1\tb\t1.0\n"

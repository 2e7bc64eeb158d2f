import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from entnorm.ann_index import (
    ForestConfig,
    IndexFormatError,
    VectorStore,
    brute_force_query,
    build_index,
    index_from_bytes,
    index_to_bytes,
    load_index,
    query,
    save_index,
)


def random_store(n, dim, seed=0):
    rng = np.random.default_rng(seed)
    return VectorStore([f"E{i}" for i in range(n)], [f"n{i}" for i in range(n)], rng.normal(size=(n, dim)))


def linear_scan(store, q, k):
    """Independent oracle: full cosine-distance sort with a stable row tie-break."""
    q = q / np.linalg.norm(q)
    dists = []
    for i, v in enumerate(store.vectors):
        d = 1.0 - float(np.dot(v, q)) / float(np.linalg.norm(v))
        dists.append((min(2.0, max(0.0, d)), i))
    return [i for _, i in sorted(dists)[:k]]


def test_store_normalizes_and_validates():
    s = VectorStore(["a", "b"], ["x", "y"], np.array([[3.0, 4.0], [0.0, 2.0]]))
    np.testing.assert_allclose(np.linalg.norm(s.vectors, axis=1), 1.0)
    with pytest.raises(ValueError):
        VectorStore(["a"], ["x"], np.zeros((1, 2)))
    with pytest.raises(ValueError):
        VectorStore(["a", "b"], ["x"], np.ones((2, 2)))


def test_small_store_is_single_leaf():
    store = random_store(10, 4)
    forest = build_index(store, n_trees=3, max_leaf_size=16)
    assert all(forest.left[r] < 0 for r in forest.roots)


@pytest.mark.parametrize("split", ["two_means", "random_pair"])
def test_every_row_in_every_tree_once(split):
    store = random_store(300, 8, seed=1)
    forest = build_index(store, n_trees=5, max_leaf_size=7, seed=2, split=split)
    for t in range(forest.n_trees):
        assert sorted(forest.tree_rows(t).tolist()) == list(range(300))
    internal = forest.left >= 0
    norms = np.linalg.norm(forest.normals[forest.split[internal]], axis=1)
    np.testing.assert_allclose(norms, 1.0)


def test_same_seed_same_forest():
    store = random_store(200, 6)
    assert build_index(store, 4, 8, seed=5) == build_index(store, 4, 8, seed=5)
    assert build_index(store, 4, 8, seed=5) != build_index(store, 4, 8, seed=6)


def test_duplicates_terminate():
    v = np.tile([1.0, 2.0, 3.0], (100, 1))
    store = VectorStore([str(i) for i in range(100)], [str(i) for i in range(100)], v)
    forest = build_index(store, n_trees=2, max_leaf_size=4)
    assert sorted(forest.tree_rows(0).tolist()) == list(range(100))
    got = query(forest, store, v[0], 3, search_budget=100)
    assert [n.row_id for n in got] == [0, 1, 2]


def test_brute_force_examples():
    single = VectorStore(["a"], ["x"], np.array([[1.0, 0.0]]))
    assert [n.row_id for n in brute_force_query(single, np.array([0.0, 1.0]), 5)] == [0]
    twins = VectorStore(["a", "b", "c"], ["x", "y", "z"], np.array([[0.0, 1.0], [1.0, 1.0], [1.0, 1.0]]))
    res = brute_force_query(twins, np.array([1.0, 1.0]), 2)
    assert [n.row_id for n in res] == [1, 2]


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 120), st.integers(2, 6), st.integers(0, 10_000), st.integers(1, 10))
def test_brute_force_matches_oracle_and_exhaustive_query(n, dim, seed, k):
    store = random_store(n, dim, seed)
    q = np.random.default_rng(seed + 1).normal(size=dim)
    exact = brute_force_query(store, q, k)
    assert [x.row_id for x in exact] == linear_scan(store, q, k)
    forest = build_index(store, n_trees=3, max_leaf_size=5, seed=seed)
    assert query(forest, store, q, k, search_budget=n) == exact
    d = [x.distance for x in exact]
    assert d == sorted(d) and all(0.0 <= x <= 2.0 for x in d)


def test_self_retrieval():
    store = random_store(1000, 16, seed=3)
    forest = build_index(store, n_trees=10, max_leaf_size=16)
    for row in range(0, 1000, 37):
        top = query(forest, store, store.vectors[row], 1, search_budget=200)[0]
        assert top.row_id == row and top.distance <= 1e-9


def test_recall_increases_with_budget():
    store = random_store(2000, 32, seed=4)
    forest = build_index(store, n_trees=20, max_leaf_size=16, seed=1)
    rng = np.random.default_rng(9)
    queries = rng.normal(size=(40, 32))
    recalls = []
    for budget in (20, 200, 2000):
        hits = 0
        for q in queries:
            truth = {n.row_id for n in brute_force_query(store, q, 10)}
            hits += len(truth & {n.row_id for n in query(forest, store, q, 10, budget)})
        recalls.append(hits / 400)
    assert recalls[0] <= recalls[1] <= recalls[2] == 1.0


def test_query_errors():
    store = random_store(50, 4)
    forest = build_index(store, 2, 8)
    with pytest.raises(ValueError):
        query(forest, store, np.ones(5), 3)
    with pytest.raises(ValueError):
        query(forest, store, np.zeros(4), 3)
    with pytest.raises(ValueError):
        query(forest, store, np.ones(4), 0)
    with pytest.raises(ValueError):
        build_index(store, dim=7)
    with pytest.raises(ValueError):
        ForestConfig(n_trees=0)


def test_persistence_round_trip():
    store = random_store(500, 12, seed=7)
    forest = build_index(store, n_trees=8, max_leaf_size=10, seed=3)
    buf = io.BytesIO()
    save_index(forest, store, buf, fingerprint="abc123")
    buf.seek(0)
    f2, s2, fp = load_index(buf)
    assert fp == "abc123" and f2 == forest and s2 == store
    rng = np.random.default_rng(0)
    for q in rng.normal(size=(100, 12)):
        assert query(f2, s2, q, 5, 60) == query(forest, store, q, 5, 60)


def test_persistence_errors():
    store = random_store(40, 3)
    data = index_to_bytes(build_index(store, 2, 8), store, "fp")
    with pytest.raises(IndexFormatError):
        index_from_bytes(data[:-3])
    with pytest.raises(IndexFormatError):
        index_from_bytes(data[:10])
    with pytest.raises(IndexFormatError, match="magic"):
        index_from_bytes(b"NSE1" + data[4:])
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0x01
    with pytest.raises(IndexFormatError):
        index_from_bytes(bytes(flipped))
    bad_version = data[:4] + (7).to_bytes(4, "little") + data[8:]
    with pytest.raises(IndexFormatError, match="version"):
        index_from_bytes(bad_version)

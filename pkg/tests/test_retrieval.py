"""Indices, quota allocation, fusion and index files."""
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpformer.retrieval import (ItemWeightStore, ObjectiveIndex, SearchResult, aggregate_user_weights,
                                allocate_quota, allocate_with_capacity, build_indices, fuse, load_indices,
                                positive_items, retrieve, save_indices, search_approx, search_exact)


def unit(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def naive_top(emb, ids, query, q):
    scored = sorted(((-float(e @ query), int(i)) for e, i in zip(emb, ids)))
    return [i for _, i in scored[:q]]


# -- search -----------------------------------------------------------------------------------

def test_exact_search_matches_full_scan():
    rng = np.random.default_rng(0)
    emb = unit(rng, 500, 8)
    ids = rng.permutation(5000)[:500]
    ix = ObjectiveIndex(0, ids, emb)
    for _ in range(30):
        query = unit(rng, 1, 8)[0]
        res = search_exact(ix, query, 25)
        assert res.ids.tolist() == naive_top(emb, ids, query, 25)
        assert (np.diff(res.scores) <= 0).all()


def test_ties_break_by_ascending_id():
    emb = np.tile([[1.0, 0.0]], (5, 1))
    ix = ObjectiveIndex(0, [9, 3, 7, 1, 5], emb)
    assert search_exact(ix, np.array([1.0, 0.0]), 3).ids.tolist() == [1, 3, 5]


def test_self_query_ranks_first_and_edge_cases():
    rng = np.random.default_rng(1)
    emb = unit(rng, 50, 6)
    ix = ObjectiveIndex(0, np.arange(50), emb)
    assert search_exact(ix, emb[17], 1).ids.tolist() == [17]
    assert search_exact(ix, emb[0], 0).ids.size == 0
    res = search_exact(ix, emb[0], 80)
    assert res.truncated and res.ids.size == 50
    with pytest.raises(ValueError):
        search_exact(ix, emb[0], -1)


def test_index_is_immutable_and_ids_unique():
    ix = ObjectiveIndex(0, [2, 1], np.eye(2))
    with pytest.raises(ValueError):
        ix.embeddings[0, 0] = 5.0
    with pytest.raises(ValueError):
        ObjectiveIndex(0, [1, 1], np.eye(2))


def test_approx_without_structure_falls_back():
    ix = ObjectiveIndex(0, np.arange(3), np.eye(3))
    res = search_approx(ix, np.array([0.0, 1.0, 0.0]), 1)
    assert res.fallback and res.ids.tolist() == [1]


def test_approx_recall_small_scale_and_determinism():
    rng = np.random.default_rng(2)
    emb = unit(rng, 2000, 16)
    ix = ObjectiveIndex(0, np.arange(2000), emb)
    ix.build_ivf(seed=3)
    hits = 0
    for _ in range(50):
        q = unit(rng, 1, 16)[0]
        a = search_approx(ix, q, 100)
        hits += len(set(a.ids.tolist()) & set(search_exact(ix, q, 100).ids.tolist()))
        assert np.array_equal(a.ids, search_approx(ix, q, 100).ids)
    assert hits / 5000 >= 0.95
    q = unit(rng, 1, 16)[0]
    assert set(search_approx(ix, q, 2000).ids.tolist()) == set(range(2000))


# -- weights and quotas ------------------------------------------------------------------------

def test_aggregate_weights():
    store = ItemWeightStore(np.arange(3), [[0.2, 0.3, 0.5], [0.2, 0.3, 0.5], [1.0, 0.0, 0.0]])
    np.testing.assert_array_equal(aggregate_user_weights([], store), np.full(3, 1 / 3))
    w = np.array([0.2, 0.3, 0.5])
    e = np.exp(2 * w)
    np.testing.assert_allclose(aggregate_user_weights([0, 1], store), e / e.sum(), rtol=1e-14)
    # unknown items contribute nothing, and the window keeps only the tail
    np.testing.assert_allclose(aggregate_user_weights([99, 0, 1], store), e / e.sum(), rtol=1e-14)
    np.testing.assert_allclose(aggregate_user_weights([2, 0, 1], store, n=2), e / e.sum(), rtol=1e-14)
    with pytest.raises(ValueError):
        ItemWeightStore([0], [[0.5, 0.6]])


def test_allocate_baseline_split():
    assert allocate_quota([1 / 3] * 3, 3000).tolist() == [1000, 1000, 1000]


def test_allocate_mean_quota_example():
    assert allocate_quota([0.35, 0.18, 0.47], 3000).tolist() == [1050, 540, 1410]


def test_allocate_remainder_ties_go_to_lower_k():
    assert allocate_quota([0.5, 0.5], 3).tolist() == [2, 1]
    assert allocate_quota([0.25] * 4, 2).tolist() == [1, 1, 0, 0]


def test_allocate_sums_exactly_over_random_draws():
    rng = np.random.default_rng(4)
    for _ in range(10_000):
        K = int(rng.integers(1, 6))
        w = rng.dirichlet(np.ones(K))
        q = int(rng.integers(0, 5000))
        alloc = allocate_quota(w, q)
        assert alloc.sum() == q and (alloc >= 0).all()


def test_allocate_is_scale_exact():
    w = np.random.default_rng(5).dirichlet(np.ones(3))
    q = 10 ** 6
    assert np.abs(allocate_quota(w, q) / q - w).max() < 1e-5


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=6).filter(lambda x: sum(x) > 1e-3),
       st.integers(0, 10_000))
def test_allocate_stays_within_one_of_proportional(raw, q):
    w = np.array(raw) / sum(raw)
    alloc = allocate_quota(w, q)
    assert alloc.sum() == q
    assert np.all(np.abs(alloc - w * q) < 1 + 1e-6)


def test_capacity_refloors_over_remaining():
    quota = allocate_with_capacity(np.array([0.5, 0.25, 0.25]), 100, [10, 1000, 1000])
    assert quota.tolist() == [10, 45, 45]
    assert allocate_with_capacity(np.array([0.5, 0.5]), 100, [0, 30]).tolist() == [0, 30]


# -- fusion + pipeline ---------------------------------------------------------------------------

def test_fuse_dedups_keeping_best_score():
    a = SearchResult(np.array([1, 2]), np.array([0.9, 0.5]))
    b = SearchResult(np.array([2, 3]), np.array([0.8, 0.1]))
    out = fuse([a, b])
    assert [(c.item, c.score, c.objectives) for c in out] == [(1, 0.9, [0]), (2, 0.8, [0, 1]), (3, 0.1, [1])]


def _bundle(rng, sizes, d=8):
    indices = [ObjectiveIndex(k, np.arange(k * 1000, k * 1000 + n), unit(rng, n, d)) for k, n in enumerate(sizes)]
    K = len(sizes)
    store = ItemWeightStore(np.arange(5), rng.dirichlet(np.ones(K), size=5))
    return indices, store


def test_retrieve_disjoint_indices_fill_budget():
    rng = np.random.default_rng(6)
    indices, store = _bundle(rng, [400, 400, 400])
    res = retrieve(unit(rng, 3, 8), [0, 1, 2], 300, indices, store)
    assert sum(res.quota) == 300 and len(res.candidates) == 300
    assert len(set(res.item_ids())) == 300
    assert res.flags == []


def test_retrieve_redistributes_empty_index():
    rng = np.random.default_rng(7)
    indices, store = _bundle(rng, [400, 0, 400])
    res = retrieve(unit(rng, 3, 8), [], 300, indices, store)
    assert res.quota[1] == 0 and sum(res.quota) == 300
    assert "quota_redistributed" in res.flags


def test_retrieve_single_objective_equals_plain_search():
    rng = np.random.default_rng(8)
    indices, _ = _bundle(rng, [200])
    store = ItemWeightStore([0], [[1.0]])
    u = unit(rng, 1, 8)
    res = retrieve(u, [0], 50, indices, store)
    assert res.item_ids() == search_exact(indices[0], u[0], 50).ids.tolist()


def test_retrieve_keeps_each_lists_top_candidate_and_rejects_small_budget():
    rng = np.random.default_rng(9)
    emb = unit(rng, 100, 8)
    indices = [ObjectiveIndex(k, np.arange(100), emb) for k in range(3)]
    store = ItemWeightStore(np.arange(100), np.full((100, 3), 1 / 3))
    u = unit(rng, 3, 8)
    res = retrieve(u, [], 30, indices, store)
    assert len(res.candidates) <= 30
    for k in range(3):
        assert search_exact(indices[k], u[k], 1).ids[0] in res.item_ids()
    with pytest.raises(ValueError):
        retrieve(u, [], 2, indices, store)


def test_concurrent_requests_are_identical():
    rng = np.random.default_rng(10)
    indices, store = _bundle(rng, [300, 300, 300])
    u = unit(rng, 3, 8)
    base = retrieve(u, [1, 2], 120, indices, store, mode="exact")
    with ThreadPoolExecutor(4) as pool:
        outs = list(pool.map(lambda _: retrieve(u, [1, 2], 120, indices, store, pool=None), range(16)))
        nested = retrieve(u, [1, 2], 120, indices, store, pool=pool)
    for r in outs + [nested]:
        assert [(c.item, c.score, c.objectives) for c in r.candidates] == \
               [(c.item, c.score, c.objectives) for c in base.candidates]


# -- build + files --------------------------------------------------------------------------------

def test_build_membership_and_weight_coverage(caplog, tmp_path):
    rng = np.random.default_rng(11)
    items = np.array([0, 0, 1, 2, 3, 3])
    labels = np.array([[1, 1, 1], [0, 0, 0], [1, 0, 0], [0, 0, 0], [1, 0, 1], [0, 0, 0]])
    members = positive_items(items, labels)
    assert [m.tolist() for m in members] == [[0, 1, 3], [0], [0, 3]]
    emb = unit(rng, 5 * 3, 4).reshape(5, 3, 4)
    weights = rng.dirichlet(np.ones(3), size=5)
    with caplog.at_level("WARNING"):
        b = build_indices(emb, weights, members, "abc", ("a", "b", "c"), approx=True, seed=1)
    assert 0 in b.indices[1].ids and 2 not in np.concatenate([ix.ids for ix in b.indices])
    assert 2 in b.store and 4 in b.store
    np.testing.assert_array_equal(b.indices[2].embeddings[1], emb[3, 2])

    save_indices(b, tmp_path)
    back = load_indices(tmp_path)
    assert back.checkpoint_hash == "abc" and back.objectives == ("a", "b", "c")
    for x, y in zip(b.indices, back.indices):
        np.testing.assert_array_equal(x.ids, y.ids)
        np.testing.assert_array_equal(x.embeddings, y.embeddings)
        np.testing.assert_array_equal(x.ivf.centroids, y.ivf.centroids)
    np.testing.assert_array_equal(back.store.weights, b.store.weights)

    empty = build_indices(emb, weights, [np.array([0]), np.array([], int), np.array([1])], approx=False)
    assert len(empty.indices[1]) == 0 and "no positive items" in caplog.text

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causalbandit.data import Dataset
from causalbandit.matching import (
    EmptyPoolError,
    ExactIndex,
    GraphIndex,
    build_exact_index,
    build_graph_index,
    distance,
    load_index,
    query_counterfactual_neighbors,
    save_index,
)


def make_ds(n=200, d=4, K=3, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset.from_arrays(rng.random((n, d)), rng.integers(0, K + 1, n), np.full(n, 0.5), rng.normal(size=n), num_arms=K)


def brute_force(ds, q, exclude_arm, k, exclude_event=None):
    rows = [
        (math.dist(e.context, q), e.event_id, i)
        for i, e in enumerate(ds)
        if e.arm != exclude_arm and e.event_id != exclude_event
    ]
    return [i for _, _, i in sorted(rows)[:k]]


def test_distance_examples():
    x = (0.3, 0.7)
    assert distance(x, x) == 0.0
    assert distance((0, 0), (1, 0)) == 1.0
    assert distance((0, 0), (3 / 5, 4 / 5)) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        distance((0, 0), (0, 0, 0))


def test_cosine_distance():
    assert distance((1, 0), (2, 0), metric="cosine") == pytest.approx(0.0)
    assert distance((1, 0), (0, 3), metric="cosine") == pytest.approx(1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_distance_symmetric_nonnegative(a, b):
    assert distance(a, b) == distance(b, a) >= 0
    assert (distance(a, b) == 0) == (a == b)


def test_index_sizes_and_duplicates():
    one = Dataset.from_arrays([[0.5, 0.5]], [1], [1.0], [0.0])
    assert len(build_exact_index(one)) == 1
    g = build_graph_index(one)
    assert len(g) == 1 and g.edges() == set()
    dup = Dataset.from_arrays([[0.1, 0.1], [0.1, 0.1], [0.9, 0.9]], [1, 2, 1], [1, 1, 1], [0, 0, 0])
    pos, dist = build_exact_index(dup).query([0.1, 0.1], 2)
    assert pos.tolist() == [0, 1] and dist.tolist() == [0.0, 0.0]


def test_empty_and_invalid():
    empty = Dataset.from_events([], num_arms=2, dimension=2)
    with pytest.raises(ValueError):
        build_exact_index(empty)
    with pytest.raises(ValueError):
        build_graph_index(empty)
    ds = make_ds(10)
    with pytest.raises(ValueError):
        build_graph_index(ds, max_degree=1)
    with pytest.raises(ValueError):
        build_graph_index(ds, max_degree=16, ef_construction=8)


def test_five_eligible_at_known_distances():
    # Events on the first axis at distances 1..5 from the origin, shuffled; a
    # closer event with the excluded arm must never appear.
    xs = [3, 1, 5, 2, 4]
    ctx = [[float(v), 0.0] for v in xs] + [[0.5, 0.0]]
    ds = Dataset.from_arrays(ctx, [2, 2, 2, 2, 2, 1], [1] * 6, [0] * 6, [10, 11, 12, 13, 14, 15])
    for index in (build_exact_index(ds), build_graph_index(ds)):
        got = query_counterfactual_neighbors(index, ds, (0.0, 0.0), exclude_arm=1, m_prime=3)
        assert [e.event_id for e in got] == [11, 13, 10]


def test_empty_pool():
    ds = Dataset.from_arrays([[0.1], [0.2]], [1, 1], [1, 1], [0, 0])
    with pytest.raises(EmptyPoolError):
        query_counterfactual_neighbors(build_exact_index(ds), ds, (0.1,), exclude_arm=1, m_prime=2)


def test_exact_match_ranked_first():
    ds = make_ds()
    e = next(ev for ev in ds if ev.arm != 1)
    got = query_counterfactual_neighbors(build_exact_index(ds), ds, e.context, exclude_arm=1, m_prime=5)
    assert got[0].event_id == e.event_id


def test_short_pool_returns_all():
    ds = Dataset.from_arrays([[0.1], [0.2], [0.3]], [1, 2, 1], [1, 1, 1], [0, 0, 0])
    got = query_counterfactual_neighbors(build_exact_index(ds), ds, (0.1,), exclude_arm=1, m_prime=10)
    assert [e.event_id for e in got] == [1]


def test_self_exclusion():
    ds = make_ds()
    e = ds[0]
    got = query_counterfactual_neighbors(build_exact_index(ds), ds, e.context, exclude_arm=None, m_prime=3, exclude_event=e.event_id)
    assert e.event_id not in [g.event_id for g in got]


def test_ties_broken_by_event_id():
    ctx = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]
    ds = Dataset.from_arrays(ctx, [1, 1, 1, 1], [1] * 4, [0] * 4, [7, 3, 9, 1])
    pos, _ = build_exact_index(ds).query([0.0, 0.0], 2)
    assert ds.event_ids[pos].tolist() == [1, 3]


@pytest.mark.parametrize("seed", range(5))
def test_exact_matches_brute_force(seed):
    ds = make_ds(300, seed=seed)
    index = build_exact_index(ds)
    rng = np.random.default_rng(100 + seed)
    for _ in range(20):
        q = rng.random(4)
        arm = int(rng.integers(0, 4))
        got = query_counterfactual_neighbors(index, ds, q, arm, 7)
        assert [ds.position_of[e.event_id] for e in got] == brute_force(ds, q, arm, 7)


def test_query_batch_pads_and_orders():
    ds = make_ds(50)
    index = build_exact_index(ds)
    Q = np.random.default_rng(5).random((6, 4))
    pos, dist = index.query_batch(Q, 60, exclude_arm=0)
    assert pos.shape == (6, 60)
    eligible = int((ds.arms != 0).sum())
    assert np.all(pos[:, eligible:] == -1) and np.all(np.isinf(dist[:, eligible:]))
    assert np.all(np.diff(dist[:, :eligible], axis=1) >= 0)


def test_graph_determinism_and_reachability():
    ds = make_ds(300, d=6)
    a = build_graph_index(ds, rng_seed=3)
    b = build_graph_index(ds, rng_seed=3)
    assert a.edges() == b.edges()
    assert a.reachable_from_entry() == set(range(len(ds)))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 3))
def test_graph_results_respect_filter(seed, arm):
    ds = make_ds(120, d=3, seed=seed)
    index = build_graph_index(ds, max_degree=4, ef_construction=16, rng_seed=seed)
    q = np.random.default_rng(seed).random(3)
    try:
        got = query_counterfactual_neighbors(index, ds, q, arm, 5)
    except EmptyPoolError:
        assert np.all(ds.arms == arm)
        return
    ids = set(ds.event_ids.tolist())
    assert all(e.arm != arm and e.event_id in ids for e in got)
    assert len(got) == min(5, int((ds.arms != arm).sum()))


def test_graph_recall_small():
    ds = make_ds(400, d=5, seed=9)
    g, e = build_graph_index(ds), build_exact_index(ds)
    rng = np.random.default_rng(1)
    hits = 0
    for _ in range(50):
        q = rng.random(5)
        a, _ = g.query(q, 10, exclude_arm=2)
        b, _ = e.query(q, 10, exclude_arm=2)
        hits += len(set(a.tolist()) & set(b.tolist()))
    assert hits / 500 >= 0.9


def test_cosine_index_matches_brute_force():
    ds = make_ds(100, d=3, seed=2)
    index = build_exact_index(ds, metric="cosine")
    q = np.array([0.2, 0.9, 0.4])
    pos, _ = index.query(q, 5)
    d = [distance(c, q, metric="cosine") for c in ds.contexts]
    expected = sorted(range(len(d)), key=lambda i: (d[i], ds.event_ids[i]))[:5]
    assert pos.tolist() == expected


@pytest.mark.parametrize("kind", ["exact", "graph"])
def test_index_snapshot_round_trip(tmp_path, kind):
    ds = make_ds(80)
    index = build_exact_index(ds) if kind == "exact" else build_graph_index(ds, rng_seed=4)
    path = save_index(index, tmp_path / "idx.txt")
    assert path.read_text(encoding="utf-8").splitlines()[:2] == ["CAUSALBANDIT-INDEX", "1"]
    back = load_index(path)
    assert isinstance(back, ExactIndex if kind == "exact" else GraphIndex)
    q = np.full(4, 0.5)
    assert np.array_equal(back.query(q, 5, exclude_arm=1)[0], index.query(q, 5, exclude_arm=1)[0])
    if kind == "graph":
        assert back.edges() == index.edges()


def test_load_rejects_bad_magic(tmp_path):
    p = tmp_path / "x.txt"
    p.write_text("NOPE\n1\n{}\n", encoding="utf-8")
    with pytest.raises(ValueError):
        load_index(p)


def test_index_must_match_dataset():
    a, b = make_ds(20, seed=1), make_ds(21, seed=1)
    with pytest.raises(ValueError):
        query_counterfactual_neighbors(build_exact_index(a), b, np.zeros(4), 1, 3)

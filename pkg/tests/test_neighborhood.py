import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sccf.corpus import corpus_from_sequences, leave_one_out
from sccf.fism import FismConfig, FismModel, fism_user_repr
from sccf.neighborhood import (NeighborList, UserIndex, UserKNNIndex, build_user_index, cosine_sim,
                               neighbors_of_vector, normalize_rows, pop_candidates, top_beta_neighbors,
                               user_based_scores, userknn_sim, uu_candidates)
from sccf.numerics import seeded_rng

from conftest import assert_rows_unit


def _index(reps, windows=None, window=15):
    reps, valid = normalize_rows(np.asarray(reps, dtype=np.float64))
    windows = windows or [np.zeros(0, dtype=np.int64) for _ in range(len(reps))]
    return UserIndex(reps, valid, [np.asarray(w, dtype=np.int64) for w in windows], window)


def _oracle_neighbors(reps, u, beta):
    r = reps / np.linalg.norm(reps, axis=1, keepdims=True)
    s = r @ r[u]
    order = sorted((v for v in range(len(r)) if v != u), key=lambda v: (-s[v], v))
    return order[:beta]


def test_cosine_sim():
    idx = _index([[1.0, 0.0], [1.0, 1.0], [0.0, 3.0]])
    assert cosine_sim(idx, 0, 0) == pytest.approx(1.0)
    assert cosine_sim(idx, 0, 2) == pytest.approx(0.0)
    assert cosine_sim(idx, 0, 1) == pytest.approx(math.sqrt(2) / 2)


def test_top_beta_small_cases():
    reps = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]])
    idx = _index(reps)
    nb = top_beta_neighbors(idx, 0, 5)
    assert nb.users.tolist() == _oracle_neighbors(reps, 0, 5) == [1, 2]
    assert top_beta_neighbors(idx, 2, 1).users.tolist() == [1]
    assert len(top_beta_neighbors(idx, 0, 0)) == 0


def test_neighbor_ties_prefer_lower_index():
    idx = _index([[1.0, 0.0], [2.0, 0.0], [1.0, 0.0], [3.0, 0.0]])
    assert top_beta_neighbors(idx, 2, 2).users.tolist() == [0, 1]


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.integers(1, 50), st.integers(0, 10_000), st.floats(0.01, 100))
def test_top_beta_matches_oracle_and_scale_invariant(n, beta, seed, c):
    reps = seeded_rng(seed).normal(size=(n, 5))
    idx = _index(reps)
    u = seed % n
    nb = top_beta_neighbors(idx, u, beta)
    assert nb.users.tolist() == _oracle_neighbors(reps, u, beta)
    assert u not in nb.users.tolist()
    assert np.all(np.diff(nb.sims) <= 0)
    assert top_beta_neighbors(_index(c * reps), u, beta).users.tolist() == nb.users.tolist()


def test_user_based_scores_hand_sums():
    corpus = corpus_from_sequences([[9], [0, 1], [1, 2]], n_items=10)
    idx = _index(np.eye(3), windows=[[9], [0, 1], [1, 2]])
    one = user_based_scores(idx, corpus, 0, NeighborList(np.array([1]), np.array([0.8])))
    assert one == pytest.approx({0: 0.8, 1: 0.8})
    two = user_based_scores(idx, corpus, 0, NeighborList(np.array([1, 2]), np.array([0.5, 0.3])))
    assert two == pytest.approx({0: 0.5, 1: 0.8, 2: 0.3})
    own = user_based_scores(idx, corpus, 1, NeighborList(np.array([2]), np.array([0.5])))
    assert 1 not in own and own == pytest.approx({2: 0.5})


def test_window_limits_votes():
    hist = list(range(20))
    corpus = corpus_from_sequences([[50], hist], n_items=60)
    idx = build_user_index(FismModel.init(60, FismConfig(dim=4), seeded_rng(0)), corpus, window=15)
    assert idx.windows[1].tolist() == hist[-15:]
    s = user_based_scores(idx, corpus, 0, NeighborList(np.array([1]), np.array([1.0])))
    assert sorted(s) == hist[-15:]


def test_uu_candidates_oracle_and_edges():
    r = seeded_rng(3)
    seqs = [[0, 1, 2], [2, 3, 4], [4, 5, 0], [6, 7, 1]]
    corpus = corpus_from_sequences(seqs, n_items=8)
    reps = r.normal(size=(4, 3))
    idx = _index(reps, windows=seqs)
    got = uu_candidates(idx, corpus, 0, beta=2, N=3)
    nbrs = _oracle_neighbors(reps, 0, 2)
    sims = {v: cosine_sim(idx, 0, v) for v in nbrs}
    tally = {}
    for v in nbrs:
        for i in seqs[v]:
            if i not in seqs[0]:
                tally[i] = tally.get(i, 0.0) + sims[v]
    oracle = sorted(tally, key=lambda i: (-tally[i], i))[:3]
    assert got.items.tolist() == oracle
    assert np.allclose(got.scores, [tally[i] for i in oracle])
    assert len(uu_candidates(idx, corpus, 0, beta=0, N=3)) == 0
    sub = corpus_from_sequences([[0, 1, 2, 3], [1, 2]], n_items=4)
    assert len(uu_candidates(_index(np.eye(2), windows=[[0, 1, 2, 3], [1, 2]]), sub, 0, 1, 5)) == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 30), st.integers(1, 40), st.integers(0, 10_000))
def test_uu_scores_bounded_by_beta(n, beta, seed):
    r = seeded_rng(seed)
    seqs = [r.choice(20, size=int(r.integers(1, 8)), replace=False).tolist() for _ in range(n)]
    corpus = corpus_from_sequences(seqs, n_items=20)
    idx = _index(r.normal(size=(n, 4)), windows=seqs)
    for u in range(n):
        s = user_based_scores(idx, corpus, u, top_beta_neighbors(idx, u, beta))
        assert all(abs(v) <= min(beta, n - 1) + 1e-9 for v in s.values())
        assert not set(s) & set(seqs[u])


def test_build_user_index_rows():
    seqs = [[0, 1, 2], [3, 4], [0, 1, 2], []]
    corpus = corpus_from_sequences(seqs, n_items=5)
    m = FismModel.init(5, FismConfig(dim=4), seeded_rng(0))
    idx = build_user_index(m, corpus)
    assert_rows_unit(idx.reps, idx.valid)
    assert idx.valid.tolist() == [True, True, True, False]
    assert np.array_equal(idx.reps[0], idx.reps[2])
    v = fism_user_repr(m, [3, 4])
    assert np.allclose(idx.reps[1], v / np.linalg.norm(v), atol=1e-6)
    assert 3 not in top_beta_neighbors(idx, 0, 10).users.tolist()


def test_set_user_and_add_user():
    idx = _index(np.eye(3), windows=[[0], [1], [2]], window=2)
    u = idx.add_user()
    assert u == 3 and not idx.valid[u]
    idx.set_user(u, np.array([0.0, 5.0, 0.0]), [4, 5, 6])
    assert idx.valid[u] and np.allclose(idx.reps[u], [0, 1, 0]) and idx.windows[u].tolist() == [5, 6]
    assert neighbors_of_vector(idx, idx.reps[u], 1, exclude=u).users.tolist() == [1]


def test_userknn_sim_cases():
    c = corpus_from_sequences([[0, 1], [0, 1], [2, 3], [0], [0], []], n_items=4)
    assert userknn_sim(c, 0, 1) == pytest.approx(0.5)
    assert userknn_sim(c, 0, 2) == 0.0
    assert userknn_sim(c, 3, 4) == 1.0
    assert userknn_sim(c, 0, 5) == 0.0


def test_userknn_index_matches_formula():
    r = seeded_rng(1)
    seqs = [r.choice(37, size=int(r.integers(1, 12)), replace=False).tolist() for _ in range(25)]
    c = corpus_from_sequences(seqs, n_items=37)
    knn = UserKNNIndex(seqs, 37)
    for u in range(25):
        sims = knn.similarities(u)
        assert np.allclose(sims, [userknn_sim(c, u, v) for v in range(25)])
    nb = knn.neighbors(0, 5)
    assert 0 not in nb.users.tolist() and len(nb) == 5


def test_pop_candidates():
    c = corpus_from_sequences([[0, 1], [0, 2], [0, 1], [3]], n_items=4)
    assert pop_candidates(c, 3, 2).items.tolist() == [0, 1]
    assert pop_candidates(c, 0, 3).items.tolist() == [2, 3]
    counts = np.array([3, 2, 1, 1])
    assert np.array_equal(c.item_counts(), counts)
    assert pop_candidates(c, 1, 4).items.tolist() == [1, 3]


def test_index_on_split_uses_train_prefix():
    c = leave_one_out(corpus_from_sequences([[0, 1, 2, 3, 4], [1, 2, 3]], n_items=5))
    idx = build_user_index(FismModel.init(5, FismConfig(dim=3), seeded_rng(0)), c)
    assert idx.windows[0].tolist() == [0, 1, 2] and idx.windows[1].tolist() == [1]

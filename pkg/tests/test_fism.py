import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sccf.corpus import corpus_from_sequences
from sccf.fism import (FismConfig, FismModel, fism_batch_loss, fism_candidates, fism_score,
                       fism_train_epoch, fism_user_repr)
from sccf.numerics import AdamConfig, ParameterStore, finite_diff_check, seeded_rng

from conftest import perturb


def _model(P, alpha=0.5, window=None):
    s = ParameterStore()
    s.add("fism.P", np.asarray(P, dtype=np.float64))
    return FismModel(s, alpha, window)


def test_repr_limits():
    P = seeded_rng(0).normal(size=(5, 3))
    assert np.array_equal(fism_user_repr(_model(P, 0.0), [2]), P[2])
    assert np.allclose(fism_user_repr(_model(P, 1.0), [1, 4]), (P[1] + P[4]) / 2)
    assert np.allclose(fism_user_repr(_model(P, 0.0), [0, 1, 3]), P[[0, 1, 3]].sum(axis=0))


def test_repr_hand_value():
    P = [[1.0, 0.0], [0.0, 2.0], [3.0, -1.0]]
    expected = np.array([4.0, 1.0]) / math.sqrt(3)
    assert np.allclose(fism_user_repr(_model(P), [0, 1, 2]), expected)


def test_repr_window_and_exclude():
    P = np.eye(4)
    m = _model(P, 0.0)
    assert np.array_equal(fism_user_repr(m, [0, 1, 2, 3], window=2), [0, 0, 1, 1])
    assert np.array_equal(fism_user_repr(m, [0, 1, 2], exclude=1), [1, 0, 1, 0])
    with pytest.raises(ValueError, match="no history"):
        fism_user_repr(m, [1], exclude=1)
    assert np.array_equal(_model(P, 0.0, window=2).user_repr([0, 1, 2, 3]), [0, 0, 1, 1])


def test_score():
    m = _model([[0.6, 0.8], [-0.8, 0.6], [1.0, 2.0]])
    assert fism_score(m, m.P[0], 0) == pytest.approx(1.0)
    assert fism_score(m, m.P[0], 1) == pytest.approx(0.0)
    v = np.array([0.5, -2.0])
    assert fism_score(m, v, 2) == pytest.approx(0.5 * 1.0 + -2.0 * 2.0)
    with pytest.raises(IndexError):
        fism_score(m, v, 3)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 10.0), st.integers(0, 1000))
def test_scaling_embeddings_keeps_order(c, seed):
    P = seeded_rng(seed).normal(size=(12, 4))
    hist = [0, 3, 5]
    base = _model(P)
    scaled = _model(c * P)
    m1, m2 = fism_user_repr(base, hist), fism_user_repr(scaled, hist)
    assert np.allclose(scaled.P @ m2, c * c * (base.P @ m1))
    corpus = corpus_from_sequences([hist], n_items=12)
    assert fism_candidates(base, corpus, 0, 12).items.tolist() == fism_candidates(scaled, corpus, 0, 12).items.tolist()


def test_candidates_scalar_order_and_exclusion():
    m = _model([[3.0], [2.0], [1.0]], alpha=0.0)
    corpus = corpus_from_sequences([[0]], n_items=3)
    # serving uses the history itself, so score against m_u = [1] via an explicit check
    assert np.array_equal(np.argsort(-(m.P @ np.ones(1)), kind="stable"), [0, 1, 2])
    got = fism_candidates(m, corpus, 0, 5)
    assert got.items.tolist() == [1, 2]


def test_candidates_match_bruteforce():
    r = seeded_rng(4)
    m = _model(r.normal(size=(5, 3)))
    corpus = corpus_from_sequences([[1, 3]], n_items=5)
    got = fism_candidates(m, corpus, 0, 3)
    s = m.P @ fism_user_repr(m, [1, 3])
    oracle = sorted((i for i in range(5) if i not in (1, 3)), key=lambda i: (-s[i], i))
    assert got.items.tolist() == oracle
    assert np.allclose(got.scores, s[oracle])


def test_untrained_loss_is_ln2():
    m = _model(np.zeros((4, 3)))
    loss, M, _ = fism_batch_loss(m, np.array([0]), np.array([2]), with_grad=False)
    assert M == 2 and loss == pytest.approx(math.log(2))
    loss, M, _ = fism_batch_loss(m, np.array([0, 1]), np.array([2, 3]))
    assert loss == pytest.approx(math.log(2))


def test_self_exclusion_in_training():
    # one positive pooled from nothing but itself would score p.p; exclusion gives 0 logit
    P = np.array([[2.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
    m = _model(P, alpha=0.0)
    loss, _, _ = fism_batch_loss(m, np.array([0, 1]), np.zeros(0, dtype=np.int64), with_grad=False)
    # positive 0 pooled from {1} -> 0; positive 1 pooled from {0} -> p0.p1 = 0
    assert loss == pytest.approx(math.log(2))


@pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0])
def test_gradient_check(alpha):
    m = FismModel.init(6, FismConfig(dim=4, alpha=alpha), seeded_rng(0))
    m.store = perturb(m.store.astype(np.float64), 0.5)
    H = np.array([0, 2, 3, 5])
    neg = np.array([1, 4, 1, 4])
    _, _, g = fism_batch_loss(m, H, neg, l2=0.01)
    rep = finite_diff_check(lambda s: fism_batch_loss(FismModel(s, alpha), H, neg, l2=0.01, with_grad=False)[0],
                            m.store, g, h=1e-5, tol=1e-3)
    assert rep.passed, rep


def test_toy_training_converges():
    corpus = corpus_from_sequences([[0, 1], [0, 1], [2, 3]], n_items=4)
    m = FismModel.init(4, FismConfig(dim=8), seeded_rng(0))
    r = seeded_rng(1)
    losses = [fism_train_epoch(m, corpus, 1, r, AdamConfig(lr=0.01)) for _ in range(50)]
    assert losses[0] == pytest.approx(math.log(2), abs=0.01)
    assert np.all(np.diff(losses) <= 0)
    assert losses[-1] < 0.1


def test_training_is_seed_deterministic(toy_corpus):
    def run():
        m = FismModel.init(toy_corpus.n_items, FismConfig(dim=4), seeded_rng(0))
        fism_train_epoch(m, toy_corpus, 1, seeded_rng(9))
        return m.P.tobytes()
    assert run() == run()

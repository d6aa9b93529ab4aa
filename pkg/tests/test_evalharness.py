import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sccf.corpus import corpus_from_sequences, leave_one_out
from sccf.evalharness import (KS, LatencyReport, evaluate, hr_at_k, latency_bench, ndcg_at_k, pop_scorer,
                              rank_from_scores, rank_of_target, rows_to_tsv, sccf_scorer,
                              similarity_distribution, sweep, ui_scorer, userknn_scorer, uu_scorer)
from sccf.fism import FismModel
from sccf.fusion import FusionNet
from sccf.neighborhood import UserKNNIndex, build_user_index
from sccf.numerics import ParameterStore, seeded_rng


def _oracle_rank(scores, target, exclude):
    # full sort, target placed after every item with an equal score
    keep = [i for i in range(len(scores)) if i not in set(exclude) or i == target]
    order = sorted(keep, key=lambda i: (-scores[i], i == target))
    return order.index(target) + 1


def test_rank_cases():
    assert rank_from_scores(np.array([0.1, 0.9, 0.5]), 1) == 1
    assert rank_from_scores(np.array([0.5, 0.5, 0.1]), 0) == 2
    assert rank_from_scores(np.array([0.9, 0.5, 0.1]), 1, exclude=[0]) == 1
    assert rank_from_scores(np.array([-np.inf, -np.inf, 0]), 0) == 3


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 50), st.integers(0, 100_000))
def test_rank_matches_full_sort(m, seed):
    r = seeded_rng(seed)
    scores = r.integers(0, 5, size=m).astype(float)  # plenty of ties
    target = int(r.integers(m))
    excl = [int(i) for i in r.choice(m, size=int(r.integers(0, m)), replace=False) if i != target]
    assert rank_from_scores(scores, target, excl) == _oracle_rank(scores, target, excl)


def test_hr_ndcg_examples():
    assert hr_at_k([1, 1, 1], 20) == 1.0
    assert hr_at_k([1, 100], 20) == 0.5
    assert hr_at_k([5, 9], 10) == 1.0
    assert ndcg_at_k([1], 10) == 1.0
    assert ndcg_at_k([3], 3) == pytest.approx(0.5)
    assert ndcg_at_k([21], 20) == 0.0
    with pytest.raises(ValueError):
        hr_at_k([], 1)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 500), min_size=1, max_size=50))
def test_metric_monotone_and_bounded(ranks):
    hr = [hr_at_k(ranks, k) for k in KS]
    nd = [ndcg_at_k(ranks, k) for k in KS]
    assert hr == sorted(hr) and nd == sorted(nd)
    assert all(0 <= n <= h <= 1 for n, h in zip(nd, hr))
    per_user = [ndcg_at_k([r], 50) for r in ranks]
    assert all(p <= hr_at_k([r], 50) for p, r in zip(per_user, ranks))


def test_report_tsv():
    c = leave_one_out(corpus_from_sequences([[0, 1, 2, 3], [1, 2, 3, 0]], n_items=5))
    rep = evaluate(pop_scorer(np.array([6, 0, 0, 5, 4.0])), c)
    assert rep.n_evaluated == 2 and rep.ranks.tolist() == [1, 1]
    assert rep.to_tsv().splitlines()[0] == "k\thr\tndcg"
    assert rep.to_tsv().splitlines()[1] == "20\t1.0000\t1.0000"


def test_all_scorers_agree_with_oracle(toy_corpus, fism_model):
    idx = build_user_index(fism_model, toy_corpus)
    net = FusionNet.init(fism_model.dim, (8,), seeded_rng(0))
    knn = UserKNNIndex([toy_corpus.history(u) for u in range(toy_corpus.n_users)], toy_corpus.n_items)
    scorers = [ui_scorer(fism_model), uu_scorer(idx, toy_corpus.n_items, 10),
               sccf_scorer(net, fism_model, idx, toy_corpus, 5, 10),
               pop_scorer(toy_corpus.item_counts()), userknn_scorer(knn, 10)]
    for sc in scorers:
        for u in range(0, toy_corpus.n_users, 7):
            h = toy_corpus.history(u)
            s = sc(u, h)
            t = int(toy_corpus.test[u])
            assert rank_of_target(sc, toy_corpus, u) == _oracle_rank(s, t, h.tolist())


def test_similarity_distribution():
    P = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    model = FismModel(ParameterStore({"fism.P": P}), 0.0, None)
    c = leave_one_out(corpus_from_sequences([[0, 1, 0 + 2]], n_items=3))
    # history [0] -> m_u = p0; valid = 1, test = 2
    h = similarity_distribution(model, c, {"ui": {0: [0]}, "uu": {0: [1, 2]}}, target="valid")
    assert len(h.edges) == 41
    cos_gt = 0.0
    bins = np.histogram([cos_gt], h.edges)[0]
    assert np.array_equal(h.counts["gt"], bins)
    assert np.array_equal(h.counts["ui"], np.histogram([1.0], h.edges)[0])
    mean_uu = (0.0 + 1 / math.sqrt(2)) / 2
    assert np.array_equal(h.counts["uu"], np.histogram([mean_uu], h.edges)[0])
    assert h.to_tsv().splitlines()[0] == "bin\tcount_gt\tcount_ui\tcount_uu"
    t = similarity_distribution(model, c, {}, target="test")
    assert np.array_equal(t.counts["gt"], np.histogram([1 / math.sqrt(2)], h.edges)[0])


def test_latency_bench_restores_state(toy_corpus, fism_model):
    idx = build_user_index(fism_model, toy_corpus)
    before = idx.reps.copy(), [w.copy() for w in idx.windows]
    rep = latency_bench("sccf", toy_corpus, fism_model, beta=10, trials=20, warmup=2, index=idx)
    assert np.array_equal(idx.reps, before[0])
    assert all(np.array_equal(a, b) for a, b in zip(idx.windows, before[1]))
    assert rep.total_ms == pytest.approx(rep.infer_ms + rep.identify_ms)
    knn = UserKNNIndex([toy_corpus.history(u) for u in range(toy_corpus.n_users)], toy_corpus.n_items)
    bits = knn.bits.copy()
    k = latency_bench("userknn", toy_corpus, beta=10, trials=20, warmup=2, knn=knn)
    assert k.infer_ms == 0.0 and k.method == "UserKNN"
    assert np.array_equal(knn.bits, bits)
    assert LatencyReport.HEADER == "method\tinfer_ms\tidentify_ms\ttotal_ms"
    with pytest.raises(ValueError):
        latency_bench("itemknn", toy_corpus)


def test_sweep_records_failures_and_is_deterministic():
    def run(cell):
        if cell.get("b") == "bad":
            raise RuntimeError("boom")
        return {"score": float(cell["a"]) * 2}
    rows = sweep({"a": [1, 2], "b": ["ok", "bad"]}, run)
    assert len(rows) == 4
    assert [r["error"] == "" for r in rows] == [True, False, True, False]
    assert rows[0]["score"] == 2.0 and "boom" in rows[1]["error"]
    assert sweep({"a": [3]}, run) == [{"a": 3, "score": 6.0, "error": ""}]
    tsv = rows_to_tsv(rows).splitlines()
    assert tsv[0] == "a\tb\tscore\terror" and len(tsv) == 5

"""Leave-one-out metrics, the similarity-distribution analysis, real-time
latency benchmarks and grid sweeps."""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .corpus import Corpus
from .fusion import FusionNet, sccf_scores
from .neighborhood import (UserIndex, UserKNNIndex, build_user_index, top_beta_neighbors,
                           user_based_score_array)
from .numerics import SeededRng, seeded_rng

_log = logging.getLogger(__name__)

KS = (20, 50, 100)

# scorer(u, history) -> scores over all items; -inf marks items the scorer does not propose
Scorer = Callable[[int, np.ndarray], np.ndarray]


def rank_from_scores(scores: np.ndarray, target: int, exclude=None) -> int:
    """1-based rank of ``target`` among non-excluded items; ties count against the target."""
    allowed = np.ones(scores.shape[0], dtype=bool)
    if exclude is not None and len(exclude):
        allowed[np.asarray(exclude, dtype=np.int64)] = False
    allowed[target] = False
    st = scores[target]
    return 1 + int(np.count_nonzero(allowed & (scores >= st)))


def rank_of_target(scorer: Scorer, corpus: Corpus, u: int, target: int | None = None,
                   history=None) -> int:
    history = corpus.history(u) if history is None else history
    target = int(corpus.test[u]) if target is None else target
    return rank_from_scores(np.asarray(scorer(u, history)), target, history)


def hr_at_k(ranks, k: int) -> float:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no ranks")
    return float(np.mean(ranks <= k))


def ndcg_at_k(ranks, k: int) -> float:
    """Mean of (2^[rank<=k] - 1) / log2(rank + 1)."""
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ValueError("no ranks")
    gain = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(np.mean(gain))


@dataclass
class EvalReport:
    hr: dict[int, float]
    ndcg: dict[int, float]
    n_evaluated: int
    ranks: np.ndarray | None = field(default=None, repr=False)

    def to_tsv(self) -> str:
        lines = ["k\thr\tndcg"]
        lines += [f"{k}\t{self.hr[k]:.4f}\t{self.ndcg[k]:.4f}" for k in sorted(self.hr)]
        return "\n".join(lines) + "\n"


def evaluate(scorer: Scorer, corpus: Corpus, users=None, ks=KS, target: str = "test") -> EvalReport:
    labels = corpus.test if target == "test" else corpus.valid
    users = np.flatnonzero(labels >= 0) if users is None else np.asarray(users)
    ranks = np.array([rank_of_target(scorer, corpus, int(u), int(labels[u])) for u in users])
    return EvalReport({k: hr_at_k(ranks, k) for k in ks}, {k: ndcg_at_k(ranks, k) for k in ks},
                      len(ranks), ranks)


# --- scorers -----------------------------------------------------------------


def ui_scorer(model) -> Scorer:
    P = model.P

    def score(u, history):
        return (P @ model.user_repr(history)).astype(np.float64)
    return score


def uu_scorer(index: UserIndex, n_items: int, beta: int) -> Scorer:
    def score(u, history):
        nb = top_beta_neighbors(index, u, beta)
        s, touched = user_based_score_array(index, nb, n_items)
        return np.where(touched, s, -np.inf)
    return score


def sccf_scorer(net: FusionNet, model, index: UserIndex, corpus: Corpus, N: int, beta: int) -> Scorer:
    def score(u, history):
        items, logits = sccf_scores(net, model, index, corpus, history, N, beta, user=u)
        out = np.full(corpus.n_items, -np.inf)
        out[items] = logits
        return out
    return score


def pop_scorer(counts: np.ndarray) -> Scorer:
    counts = counts.astype(np.float64)
    return lambda u, history: counts


def userknn_scorer(knn: UserKNNIndex, beta: int) -> Scorer:
    def score(u, history):
        c = knn.candidates(u, beta, knn.n_items)
        out = np.full(knn.n_items, -np.inf)
        out[c.items] = c.scores
        return out
    return score


# --- complementarity analysis --------------------------------------------------


@dataclass
class SimilarityHistogram:
    edges: np.ndarray
    counts: dict[str, np.ndarray]

    def to_tsv(self) -> str:
        names = list(self.counts)
        lines = ["bin\t" + "\t".join(f"count_{n}" for n in names)]
        for b in range(len(self.edges) - 1):
            lines.append(f"{self.edges[b]:.2f}\t" + "\t".join(str(int(self.counts[n][b])) for n in names))
        return "\n".join(lines) + "\n"


def _cosines(m_u: np.ndarray, Q: np.ndarray) -> np.ndarray:
    qn = np.linalg.norm(Q, axis=1)
    mn = np.linalg.norm(m_u)
    return (Q @ m_u) / np.maximum(qn * mn, 1e-12)


def similarity_distribution(model, corpus: Corpus, lists: dict[str, dict[int, np.ndarray]],
                            users=None, target: str = "test", bin_width: float = 0.05,
                            reps: dict[int, np.ndarray] | None = None) -> SimilarityHistogram:
    """Per user: cosine(m_u, q_target) and the mean cosine over each candidate list, binned.

    ``lists`` maps a channel name (e.g. "ui", "uu") to user -> candidate items.
    """
    labels = corpus.test if target == "test" else corpus.valid
    users = np.flatnonzero(labels >= 0) if users is None else users
    edges = np.round(np.arange(-1.0, 1.0 + bin_width / 2, bin_width), 10)
    values: dict[str, list[float]] = {"gt": []}
    values.update({name: [] for name in lists})
    P = model.P.astype(np.float64)
    for u in users:
        u = int(u)
        m_u = reps[u] if reps is not None else model.user_repr(corpus.history(u))
        m_u = np.asarray(m_u, dtype=np.float64)
        values["gt"].append(float(_cosines(m_u, P[[labels[u]]])[0]))
        for name, per_user in lists.items():
            items = per_user.get(u)
            if items is not None and len(items):
                values[name].append(float(_cosines(m_u, P[np.asarray(items)]).mean()))
    counts = {}
    for name, vals in values.items():
        v = np.clip(np.asarray(vals, dtype=np.float64), -1.0, 1.0)
        counts[name] = np.histogram(v, bins=edges)[0]
    return SimilarityHistogram(edges, counts)


# --- latency -----------------------------------------------------------------


@dataclass
class LatencyReport:
    method: str
    infer_ms: float
    identify_ms: float
    total_ms: float
    trials: int

    HEADER = "method\tinfer_ms\tidentify_ms\ttotal_ms"

    def tsv_row(self) -> str:
        return f"{self.method}\t{self.infer_ms:.4f}\t{self.identify_ms:.4f}\t{self.total_ms:.4f}"


def _pick_events(corpus: Corpus, n: int, rng: SeededRng):
    """(user, new item) pairs: each sampled user's held-out test item, else a random unseen item."""
    users = rng.integers(0, corpus.n_users, size=n)
    out = []
    for u in users.tolist():
        item = int(corpus.test[u]) if corpus.has_split and corpus.test[u] >= 0 else int(rng.integers(corpus.n_items))
        out.append((u, item))
    return out


def latency_bench(method: str, corpus: Corpus, model=None, beta: int = 100, trials: int = 200,
                  warmup: int = 20, seed: int = 0, index: UserIndex | None = None,
                  knn: UserKNNIndex | None = None, window: int = 15) -> LatencyReport:
    """Mean per-event cost of absorbing one new interaction.

    SCCF: re-infer the user's representation (infer) and find its top-beta cosine
    neighbors (identify). UserKNN: recompute the set-overlap similarities of the
    user against all users and select top-beta (identify; infer is 0).
    """
    method = method.lower()
    rng = seeded_rng(seed)
    events = _pick_events(corpus, warmup + trials, rng)
    infer_t, ident_t = [], []
    if method == "sccf":
        index = index or build_user_index(model, corpus, window=window)
        for n, (u, item) in enumerate(events):
            hist = np.append(corpus.history(u), item)
            saved = (index.reps[u].copy(), bool(index.valid[u]), index.windows[u])
            t0 = time.perf_counter()
            rep = model.user_repr(hist)
            index.set_user(u, rep, hist)
            t1 = time.perf_counter()
            top_beta_neighbors(index, u, beta)
            t2 = time.perf_counter()
            index.reps[u], index.valid[u], index.windows[u] = saved
            if n >= warmup:
                infer_t.append(t1 - t0)
                ident_t.append(t2 - t1)
    elif method == "userknn":
        knn = knn or UserKNNIndex([corpus.history(u) for u in range(corpus.n_users)], corpus.n_items)
        for n, (u, item) in enumerate(events):
            old = knn.histories[u]
            hist = np.append(old, item)
            t1 = time.perf_counter()
            knn.set_user(u, hist)
            knn.neighbors(u, beta)
            t2 = time.perf_counter()
            knn.set_user(u, old)
            if n >= warmup:
                infer_t.append(0.0)
                ident_t.append(t2 - t1)
    else:
        raise ValueError(f"unknown latency method {method!r}")
    inf = 1e3 * float(np.mean(infer_t))
    ide = 1e3 * float(np.mean(ident_t))
    return LatencyReport("SCCF" if method == "sccf" else "UserKNN", inf, ide, inf + ide, trials)


@dataclass
class ScalingReport:
    item_counts: list[int]
    sccf_identify_ms: list[float]
    knn_identify_ms: list[float]
    sccf_slope: float  # ms per item
    knn_slope: float

    @property
    def slope_ratio(self) -> float:
        return self.knn_slope / max(abs(self.sccf_slope), 1e-15)

    def to_tsv(self) -> str:
        lines = ["items\tsccf_identify_ms\tuserknn_identify_ms"]
        lines += [f"{m}\t{a:.4f}\t{b:.4f}" for m, a, b in
                  zip(self.item_counts, self.sccf_identify_ms, self.knn_identify_ms)]
        lines.append(f"# slope ms/item: sccf={self.sccf_slope:.3e} userknn={self.knn_slope:.3e} "
                     f"ratio={self.slope_ratio:.1f}")
        return "\n".join(lines) + "\n"


def identify_scaling(make_model: Callable[[int], object], item_counts=(3416, 34160, 341600),
                     n_users: int = 6040, avg_len: int = 160, beta: int = 100, trials: int = 100,
                     warmup: int = 10, seed: int = 0) -> ScalingReport:
    """Identify-time growth with item vocabulary size on synthetic histories.

    Each vocabulary size gets the same number of users and history lengths, so
    only the item count varies between rows.
    """
    from .synthetic import random_histories

    sccf_ms, knn_ms = [], []
    for m in item_counts:
        corpus = random_histories(n_users, m, avg_len, seed=seed)
        model = make_model(m)
        sccf = latency_bench("sccf", corpus, model, beta, trials, warmup, seed)
        knn = latency_bench("userknn", corpus, None, beta, trials, warmup, seed)
        sccf_ms.append(sccf.identify_ms)
        knn_ms.append(knn.identify_ms)
        _log.info("items=%d sccf identify %.3f ms, userknn identify %.3f ms", m, sccf.identify_ms, knn.identify_ms)
    x = np.asarray(item_counts, dtype=np.float64)
    s_slope = float(np.polyfit(x, sccf_ms, 1)[0])
    k_slope = float(np.polyfit(x, knn_ms, 1)[0])
    return ScalingReport(list(item_counts), sccf_ms, knn_ms, s_slope, k_slope)


# --- sweeps ------------------------------------------------------------------


def sweep(grid: dict[str, Iterable], run: Callable[[dict], dict[str, float]]) -> list[dict]:
    """Run every cell of the cartesian grid; failures are recorded and the sweep continues."""
    keys = list(grid)
    rows = []
    for values in itertools.product(*(list(grid[k]) for k in keys)):
        cell = dict(zip(keys, values))
        try:
            metrics = run(dict(cell))
            rows.append({**cell, **metrics, "error": ""})
        except Exception as e:  # noqa: BLE001 - one bad cell must not stop the sweep
            _log.exception("sweep cell %s failed", cell)
            rows.append({**cell, "error": f"{type(e).__name__}: {e}"})
    return rows


def rows_to_tsv(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols: list[str] = []
    for r in rows:
        cols += [c for c in r if c not in cols]
    cols = [c for c in cols if c != "error"] + ["error"]

    def fmt(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)
    return "\n".join(["\t".join(cols)] + ["\t".join(fmt(r.get(c, "")) for c in cols) for r in rows]) + "\n"

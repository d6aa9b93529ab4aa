"""User-based component: cosine neighbors over inferred user representations,
similarity-weighted votes from each neighbor's recent items, and the Pop and
UserKNN reference scorers."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus
from .ranking import ScoredCandidateList, exclusion_mask, ranked_list, top_n

_log = logging.getLogger(__name__)


@dataclass
class UUConfig:
    beta: int = 100
    window: int = 15


@dataclass
class NeighborList:
    users: np.ndarray
    sims: np.ndarray

    def __len__(self) -> int:
        return len(self.users)


@dataclass
class UserIndex:
    """Unit-normalized user rows plus each user's latest-``window`` items.

    Rows for users without a usable representation are zero and marked invalid;
    they are never returned as neighbors.
    """

    reps: np.ndarray
    valid: np.ndarray
    windows: list[np.ndarray]
    window: int = 15
    build_timestamp: float = field(default_factory=lambda: float(int(time.time())))

    @property
    def n_users(self) -> int:
        return self.reps.shape[0]

    def set_user(self, u: int, rep: np.ndarray, history) -> None:
        """Replace one user's row and recency window (serving-time update)."""
        norm = float(np.linalg.norm(rep))
        if norm > 0:
            self.reps[u] = rep / norm
            self.valid[u] = True
        else:
            self.reps[u] = 0.0
            self.valid[u] = False
        self.windows[u] = np.asarray(history, dtype=np.int64)[-self.window:].copy()

    def add_user(self) -> int:
        self.reps = np.vstack([self.reps, np.zeros((1, self.reps.shape[1]), dtype=self.reps.dtype)])
        self.valid = np.append(self.valid, False)
        self.windows.append(np.zeros(0, dtype=np.int64))
        return self.n_users - 1


def normalize_rows(reps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(reps.astype(np.float64), axis=1)
    valid = norms > 0
    out = np.zeros_like(reps)
    out[valid] = (reps[valid] / norms[valid, None]).astype(reps.dtype)
    return out, valid


def build_user_index(model, corpus: Corpus, window: int = 15, histories=None) -> UserIndex:
    histories = histories if histories is not None else [corpus.history(u) for u in range(corpus.n_users)]
    reps = model.user_reprs(histories).astype(np.float32)
    reps, valid = normalize_rows(reps)
    n_bad = int((~valid).sum())
    if n_bad:
        _log.warning("%d users without a usable representation excluded from the index", n_bad)
    windows = [np.asarray(h, dtype=np.int64)[-window:].copy() for h in histories]
    return UserIndex(reps, valid, windows, window)


def cosine_sim(index: UserIndex, u: int, v: int) -> float:
    return float(index.reps[u].astype(np.float64) @ index.reps[v].astype(np.float64))


def neighbors_of_vector(index: UserIndex, vec: np.ndarray, beta: int, exclude: int | None = None) -> NeighborList:
    """Exact top-beta by cosine against a unit vector; ties go to the lower user index."""
    sims = index.reps @ vec.astype(index.reps.dtype)
    allowed = index.valid.copy()
    if exclude is not None and 0 <= exclude < allowed.size:
        allowed[exclude] = False
    users = top_n(sims, beta, allowed)
    return NeighborList(users, sims[users].astype(np.float64))


def top_beta_neighbors(index: UserIndex, u: int, beta: int) -> NeighborList:
    if beta < 1:
        return NeighborList(np.zeros(0, dtype=np.int64), np.zeros(0))
    if not index.valid[u]:
        return NeighborList(np.zeros(0, dtype=np.int64), np.zeros(0))
    return neighbors_of_vector(index, index.reps[u], beta, exclude=u)


def user_based_score_array(index: UserIndex, neighbors: NeighborList, n_items: int):
    """Dense neighbor vote sums; returns (scores, touched) over all items."""
    scores = np.zeros(n_items, dtype=np.float64)
    touched = np.zeros(n_items, dtype=bool)
    for v, s in zip(neighbors.users.tolist(), neighbors.sims.tolist()):
        w = index.windows[v]
        scores[w] += s
        touched[w] = True
    return scores, touched


def user_based_scores(index: UserIndex, corpus: Corpus, u: int, neighbors: NeighborList,
                      history=None) -> dict[int, float]:
    """item -> sum of neighbor similarities over neighbors whose recent window holds the item."""
    h = corpus.history(u) if history is None else history
    scores, touched = user_based_score_array(index, neighbors, corpus.n_items)
    touched &= exclusion_mask(corpus.n_items, h)
    items = np.flatnonzero(touched)
    return dict(zip(items.tolist(), scores[items].tolist()))


def uu_candidates(index: UserIndex, corpus: Corpus, u: int, beta: int, N: int,
                  history=None, neighbors: NeighborList | None = None) -> ScoredCandidateList:
    h = corpus.history(u) if history is None else history
    nb = neighbors if neighbors is not None else top_beta_neighbors(index, u, beta)
    if len(nb) == 0:
        return ScoredCandidateList.empty()
    scores, touched = user_based_score_array(index, nb, corpus.n_items)
    touched &= exclusion_mask(corpus.n_items, h)
    picked = top_n(scores, N, touched)
    return ScoredCandidateList(picked, scores[picked])


def userknn_sim(corpus: Corpus, u: int, v: int) -> float:
    """|R_u & R_v| / (|R_u| * |R_v|), with no square roots."""
    ru, rv = corpus.history(u), corpus.history(v)
    if len(ru) == 0 or len(rv) == 0:
        return 0.0
    return len(np.intersect1d(ru, rv)) / (len(ru) * len(rv))


class UserKNNIndex:
    """Bit-packed user-item matrix for recomputing set-overlap similarities.

    A query costs one AND + popcount over every user's full item bit-vector,
    so it grows linearly with the item vocabulary.
    """

    def __init__(self, histories, n_items: int):
        self.n_items = n_items
        self.bits = np.zeros((len(histories), -(-n_items // 8)), dtype=np.uint8)
        self.sizes = np.zeros(len(histories))
        self.histories = [np.zeros(0, dtype=np.int64)] * len(histories)
        for u, h in enumerate(histories):
            self.set_user(u, h)

    def set_user(self, u: int, history) -> None:
        row = np.zeros(self.n_items, dtype=bool)
        row[np.asarray(history, dtype=np.int64)] = True
        self.bits[u] = np.packbits(row)
        self.sizes[u] = row.sum()
        self.histories[u] = np.asarray(history, dtype=np.int64)

    def similarities(self, u: int) -> np.ndarray:
        inter = np.bitwise_count(self.bits & self.bits[u]).sum(axis=1, dtype=np.int64)
        denom = self.sizes * self.sizes[u]
        return np.divide(inter, denom, out=np.zeros(len(inter)), where=denom > 0)

    def neighbors(self, u: int, beta: int) -> NeighborList:
        sims = self.similarities(u)
        allowed = np.ones(sims.size, dtype=bool)
        allowed[u] = False
        users = top_n(sims, beta, allowed)
        return NeighborList(users, sims[users])

    def candidates(self, u: int, beta: int, N: int) -> ScoredCandidateList:
        nb = self.neighbors(u, beta)
        scores = np.zeros(self.n_items)
        touched = np.zeros(self.n_items, dtype=bool)
        for v, s in zip(nb.users.tolist(), nb.sims.tolist()):
            scores[self.histories[v]] += s
            touched[self.histories[v]] = True
        touched &= exclusion_mask(self.n_items, self.histories[u])
        picked = top_n(scores, N, touched)
        return ScoredCandidateList(picked, scores[picked])


def pop_candidates(corpus: Corpus, u: int, N: int, counts: np.ndarray | None = None) -> ScoredCandidateList:
    counts = corpus.item_counts() if counts is None else counts
    return ranked_list(counts.astype(np.float64), N, exclude=corpus.history(u))

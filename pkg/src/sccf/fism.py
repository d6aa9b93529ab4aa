"""FISM: users are the alpha-normalized sum of their items' embeddings, scored
against the same (homogeneous) item table by dot product."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, sample_negatives
from .numerics import (AdamConfig, DecaySchedule, ParameterStore, SeededRng, adam_step, add_l2,
                       log_sigmoid, sigmoid, truncated_normal_init)
from .ranking import ScoredCandidateList, ranked_list

_log = logging.getLogger(__name__)


@dataclass
class FismConfig:
    dim: int = 128
    alpha: float = 0.5
    neg_per_pos: int = 1
    window: int = 15
    l2: float = 0.0


@dataclass
class FismModel:
    store: ParameterStore
    alpha: float = 0.5
    window: int | None = 15
    kind: str = field(default="fism", init=False)

    @classmethod
    def init(cls, n_items: int, cfg: FismConfig, rng: SeededRng) -> "FismModel":
        store = ParameterStore()
        store.add("fism.P", truncated_normal_init((n_items, cfg.dim), rng=rng))
        return cls(store, cfg.alpha, cfg.window)

    @property
    def P(self) -> np.ndarray:
        return self.store["fism.P"]

    @property
    def dim(self) -> int:
        return self.P.shape[1]

    def user_repr(self, history) -> np.ndarray:
        return fism_user_repr(self, history, window=self.window)

    def user_reprs(self, histories) -> np.ndarray:
        out = np.zeros((len(histories), self.dim), dtype=self.P.dtype)
        for r, h in enumerate(histories):
            if len(h):
                out[r] = self.user_repr(h)
        return out


def fism_user_repr(model: FismModel, history, exclude: int | None = None,
                   window: int | None = None) -> np.ndarray:
    h = np.asarray(history, dtype=np.int64)
    if window:
        h = h[-window:]
    if exclude is not None:
        h = h[h != exclude]
    if h.size == 0:
        raise ValueError("no history")
    return model.P[h].sum(axis=0) / np.float32(h.size) ** model.alpha


def fism_score(model: FismModel, m_u: np.ndarray, item: int) -> float:
    if not 0 <= item < model.P.shape[0]:
        raise IndexError(f"item index {item} out of range")
    return float(m_u @ model.P[item])


def fism_batch_loss(model: FismModel, history: np.ndarray, negatives: np.ndarray,
                    l2: float = 0.0, with_grad: bool = True):
    """Loss of one user's mini-batch: every history item as a positive predicted
    from the rest of the history, plus the given negatives scored from the full
    history. Returns (loss, n_instances, grads)."""
    P = model.P
    a = model.alpha
    H = np.asarray(history, dtype=np.int64)
    neg = np.asarray(negatives, dtype=np.int64)
    n = H.size
    Ph = P[H]
    S = Ph.sum(axis=0)
    c_pos = (n - 1) ** -a if n > 1 else 0.0  # a lone positive pools nothing
    c_neg = n ** -a
    m_pos = (S[None, :] - Ph) * c_pos
    x_pos = np.einsum("ij,ij->i", m_pos, Ph)
    m_neg = S * c_neg
    Pn = P[neg]
    x_neg = Pn @ m_neg
    M = n + neg.size
    loss = -(log_sigmoid(x_pos).sum(dtype=np.float64)
             + log_sigmoid(-x_neg).sum(dtype=np.float64)) / M
    if not with_grad:
        return float(loss + l2 * model.store.l2_norm_sq()), M, None
    g_pos = ((sigmoid(x_pos) - 1.0) / M).astype(P.dtype)
    g_neg = (sigmoid(x_neg) / M).astype(P.dtype)
    dP = np.zeros_like(P)
    # target role
    np.add.at(dP, H, g_pos[:, None] * m_pos)
    np.add.at(dP, neg, g_neg[:, None] * m_neg[None, :])
    # pooled-history role; positive i does not pool itself
    gp = g_pos[:, None] * Ph
    G = gp.sum(axis=0)
    pooled = c_pos * (G[None, :] - gp) + c_neg * (g_neg @ Pn)[None, :]
    np.add.at(dP, H, pooled.astype(P.dtype))
    grads = {"fism.P": dP}
    loss += add_l2(model.store, grads, l2)
    return float(loss), M, grads


def fism_train_epoch(model: FismModel, corpus: Corpus, neg_per_pos: int, rng: SeededRng,
                     adam: AdamConfig | None = None, decay: DecaySchedule | None = None) -> float:
    """One pass over users in a seeded random order, one Adam step per user."""
    adam = adam or AdamConfig()
    total, count = 0.0, 0
    for u in rng.permutation(corpus.n_users):
        H = corpus.history(u)
        if len(H) < 2:
            continue
        neg = sample_negatives(rng, corpus.n_items, H, len(H) * neg_per_pos)
        penalty = adam.l2 * model.store.l2_norm_sq() if adam.l2 else 0.0
        loss, M, grads = fism_batch_loss(model, H, neg, adam.l2)
        adam_step(model.store, grads, adam.lr, adam.beta1, adam.beta2, adam.eps, decay)
        total += (loss - penalty) * M
        count += M
    return total / max(count, 1)


def fism_epoch_steps(corpus: Corpus) -> int:
    return sum(1 for u in range(corpus.n_users) if len(corpus.history(u)) >= 2)


def fism_candidates(model: FismModel, corpus: Corpus, user: int, N: int,
                    history=None) -> ScoredCandidateList:
    """Top-N over items the user has not interacted with, from the windowed representation."""
    h = corpus.history(user) if history is None else np.asarray(history)
    m_u = model.user_repr(h)
    return ranked_list(model.P @ m_u, N, exclude=h)

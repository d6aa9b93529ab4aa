"""Integrating component: score the union of the UI and user-based candidate
lists with a small MLP over [m_u, q_i, z_UI, z_UU]."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus
from .neighborhood import (NeighborList, UserIndex, top_beta_neighbors, user_based_score_array,
                           neighbors_of_vector)
from .numerics import (ConfigurationError, DecaySchedule, ParameterStore, SeededRng,
                       adam_step, add_l2, load_store, log_sigmoid, save_store, sigmoid,
                       truncated_normal_init)
from .ranking import ScoredCandidateList, exclusion_mask, top_n

_log = logging.getLogger(__name__)


class NoTrainingUsersError(RuntimeError):
    pass


@dataclass
class FusionConfig:
    hidden: tuple[int, ...] = (64, 32)
    l2: float = 0.0
    patience: int = 5
    N: int = 100
    max_epochs: int = 200
    batch_users: int = 64
    holdout: float = 0.1
    lr: float = 0.001


@dataclass
class FusionNet:
    store: ParameterStore

    @classmethod
    def init(cls, dim: int, hidden=(64, 32), rng: SeededRng | None = None) -> "FusionNet":
        widths = [2 * dim + 2, *hidden, 1]
        s = ParameterStore()
        for k, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            s.add(f"fusion.l{k}.w", truncated_normal_init((a, b), rng=rng))
            s.add(f"fusion.l{k}.b", np.zeros(b, dtype=np.float32))
        return cls(s)

    @property
    def n_layers(self) -> int:
        return sum(1 for k in self.store.names() if k.endswith(".w"))

    @property
    def in_width(self) -> int:
        return self.store["fusion.l0.w"].shape[0]


@dataclass
class CandidateUnion:
    items: np.ndarray
    ui: np.ndarray
    uu: np.ndarray

    def __len__(self) -> int:
        return len(self.items)


def candidate_union(c_ui: ScoredCandidateList, c_uu: ScoredCandidateList,
                    ui_scorer=None, uu_scorer=None) -> CandidateUnion:
    """Union keyed by item, ascending item order, with both channel scores.

    With a scorer the channel's true score is computed for every union item;
    without one, items missing from that list get the list's minimum score.
    """
    items = np.union1d(c_ui.items, c_uu.items).astype(np.int64)

    def channel(lst: ScoredCandidateList, scorer):
        if scorer is not None:
            return np.asarray(scorer(items), dtype=np.float64)
        fill = float(np.min(lst.scores)) if len(lst) else 0.0
        known = lst.as_dict()
        return np.array([known.get(i, fill) for i in items.tolist()], dtype=np.float64)

    return CandidateUnion(items, channel(c_ui, ui_scorer), channel(c_uu, uu_scorer))


def normalize_scores(values: np.ndarray) -> np.ndarray:
    """Per-user z-score with population std; a degenerate channel maps to zeros."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v
    sd = v.std()
    if sd < 1e-9:
        return np.zeros_like(v)
    return (v - v.mean()) / sd


def feature_matrix(m_u: np.ndarray, q: np.ndarray, z_ui: np.ndarray, z_uu: np.ndarray) -> np.ndarray:
    n = q.shape[0]
    return np.concatenate([np.broadcast_to(m_u, (n, m_u.shape[0])), q,
                           z_ui[:, None], z_uu[:, None]], axis=1)


def fusion_forward(net: FusionNet, X: np.ndarray, with_cache: bool = False):
    """Logits for a feature batch [n, 2d+2] (or a single feature vector)."""
    X = np.asarray(X)
    single = X.ndim == 1
    if single:
        X = X[None]
    if X.shape[1] != net.in_width:
        raise ConfigurationError(f"feature width {X.shape[1]} != network input width {net.in_width}")
    X = X.astype(net.store["fusion.l0.w"].dtype)
    acts = [X]
    h = X
    L = net.n_layers
    for k in range(L):
        h = h @ net.store[f"fusion.l{k}.w"] + net.store[f"fusion.l{k}.b"]
        if k < L - 1:
            h = np.maximum(h, 0)
        acts.append(h)
    out = h[:, 0]
    if single:
        out = out[0]
    return (out, acts) if with_cache else out


def _fusion_backward(net: FusionNet, acts, dlogit: np.ndarray) -> dict[str, np.ndarray]:
    grads = {}
    dh = dlogit[:, None].astype(acts[0].dtype)
    L = net.n_layers
    for k in reversed(range(L)):
        if k < L - 1:
            dh = dh * (acts[k + 1] > 0)
        grads[f"fusion.l{k}.w"] = acts[k].T @ dh
        grads[f"fusion.l{k}.b"] = dh.sum(axis=0)
        dh = dh @ net.store[f"fusion.l{k}.w"].T
    return grads


@dataclass
class FusionExample:
    """One user's union with features pre-normalized and the positive's position."""

    user: int
    m_u: np.ndarray
    items: np.ndarray
    z_ui: np.ndarray
    z_uu: np.ndarray
    positive: int  # index into items


def user_union(model, index: UserIndex, corpus: Corpus, history, N: int, beta: int,
               user: int | None = None, m_u: np.ndarray | None = None,
               neighbors: NeighborList | None = None):
    """Both candidate lists for one user plus their union with true channel scores."""
    history = np.asarray(history, dtype=np.int64)
    P = model.P
    if m_u is None:
        m_u = model.user_repr(history)
    allowed = exclusion_mask(corpus.n_items, history)
    ui_all = (P @ m_u).astype(np.float64)
    ui_items = top_n(ui_all, N, allowed)
    c_ui = ScoredCandidateList(ui_items, ui_all[ui_items])
    if neighbors is None:
        norm = float(np.linalg.norm(m_u))
        if user is not None and user < index.n_users and index.valid[user]:
            neighbors = top_beta_neighbors(index, user, beta)
        elif norm > 0:
            neighbors = neighbors_of_vector(index, m_u / norm, beta, exclude=user)
        else:
            neighbors = NeighborList(np.zeros(0, dtype=np.int64), np.zeros(0))
    uu_all, touched = user_based_score_array(index, neighbors, corpus.n_items)
    uu_items = top_n(uu_all, N, touched & allowed)
    c_uu = ScoredCandidateList(uu_items, uu_all[uu_items])
    union = candidate_union(c_ui, c_uu, ui_scorer=lambda it: ui_all[it], uu_scorer=lambda it: uu_all[it])
    return m_u, c_ui, c_uu, union


def build_fusion_examples(model, index: UserIndex, corpus: Corpus, N: int, beta: int,
                          users=None, target: str = "valid"):
    """Examples labelled with each user's held-out ``target`` item.

    Users whose target is in neither candidate list are skipped; returns
    (examples, n_skipped).
    """
    labels = corpus.valid if target == "valid" else corpus.test
    users = np.flatnonzero(labels >= 0) if users is None else users
    out, skipped = [], 0
    for u in users:
        u = int(u)
        m_u, _, _, union = user_union(model, index, corpus, corpus.history(u), N, beta, user=u)
        hit = np.flatnonzero(union.items == labels[u])
        if hit.size == 0:
            skipped += 1
            continue
        out.append(FusionExample(u, m_u.astype(np.float32), union.items,
                                 normalize_scores(union.ui), normalize_scores(union.uu), int(hit[0])))
    return out, skipped


def _stack(examples, P):
    X = np.concatenate([feature_matrix(e.m_u, P[e.items], e.z_ui, e.z_uu) for e in examples])
    sizes = np.array([len(e.items) for e in examples])
    y = np.zeros(sizes.sum(), dtype=np.float64)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    y[offsets + np.array([e.positive for e in examples])] = 1.0
    w = np.repeat(1.0 / sizes, sizes)
    return X, y, w


def fusion_loss(net: FusionNet, examples, P: np.ndarray, l2: float = 0.0, with_grad: bool = True):
    """Sum over users of the union-averaged BCE, divided by the number of users."""
    X, y, w = _stack(examples, P)
    logits, acts = fusion_forward(net, X, with_cache=True)
    logits = logits.astype(np.float64)
    nb = len(examples)
    ll = y * log_sigmoid(logits) + (1 - y) * log_sigmoid(-logits)
    loss = -np.sum(w * ll) / nb
    if not with_grad:
        return float(loss + (l2 * net.store.l2_norm_sq() if l2 else 0.0)), None
    dlogit = w * (sigmoid(logits) - y) / nb
    grads = _fusion_backward(net, acts, dlogit)
    loss += add_l2(net.store, grads, l2)
    return float(loss), grads


@dataclass
class FusionTrainLog:
    n_train: int
    n_holdout: int
    n_skipped: int
    best_epoch: int
    train_loss: list[float] = field(default_factory=list)
    holdout_loss: list[float] = field(default_factory=list)


def _run_epochs(net, train, P, cfg, rng, epochs, decay, holdout=None, log=None):
    best = (np.inf, 0, net.store.copy())
    bad = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train))
        tot = 0.0
        for s in range(0, len(order), cfg.batch_users):
            batch = [train[i] for i in order[s:s + cfg.batch_users]]
            loss, grads = fusion_loss(net, batch, P, cfg.l2)
            adam_step(net.store, grads, cfg.lr, decay=decay)
            tot += loss * len(batch)
        if log is not None:
            log.train_loss.append(tot / len(train))
        if holdout:
            hl = fusion_loss(net, holdout, P, 0.0, with_grad=False)[0]
            log.holdout_loss.append(hl)
            if hl < best[0]:
                best, bad = (hl, epoch, net.store.copy()), 0
            else:
                bad += 1
                if bad >= cfg.patience:
                    break
    if holdout:
        net.store = best[2]
        return best[1]
    return epochs


def fusion_train(net: FusionNet, corpus: Corpus, ui_model, index: UserIndex, N: int,
                 rng: SeededRng, cfg: FusionConfig | None = None, beta: int = 100,
                 examples=None, refit: bool = False) -> tuple[FusionNet, FusionTrainLog]:
    """Train on validation-item labels with a seeded 10% user holdout for early stopping.

    With ``refit`` a fresh network is then trained on all users for the
    early-stopped number of epochs.
    """
    cfg = cfg or FusionConfig()
    skipped = 0
    if examples is None:
        examples, skipped = build_fusion_examples(ui_model, index, corpus, N, beta)
    if not examples:
        raise NoTrainingUsersError("no usable fusion training users: every target missed the candidate union")
    P = ui_model.P
    perm = rng.permutation(len(examples))
    n_hold = int(round(cfg.holdout * len(examples))) if len(examples) > 1 else 0
    holdout = [examples[i] for i in perm[:n_hold]]
    train = [examples[i] for i in perm[n_hold:]]
    steps = cfg.max_epochs * -(-len(train) // cfg.batch_users)
    log = FusionTrainLog(len(train), len(holdout), skipped, 0)
    log.best_epoch = _run_epochs(net, train, P, cfg, rng, cfg.max_epochs, DecaySchedule(steps), holdout, log)
    if refit:
        net = FusionNet.init((net.in_width - 2) // 2, cfg.hidden, rng)
        steps = log.best_epoch * -(-len(examples) // cfg.batch_users)
        _run_epochs(net, examples, P, cfg, rng, log.best_epoch, DecaySchedule(steps))
    _log.info("fusion: %d train / %d holdout users, %d skipped, best epoch %d",
              log.n_train, log.n_holdout, skipped, log.best_epoch)
    return net, log


def sccf_scores(net: FusionNet, ui_model, index: UserIndex, corpus: Corpus, history, N: int,
                beta: int, user: int | None = None, m_u=None, neighbors=None):
    """Fusion logits for every union item; returns (union items, logits)."""
    m_u, _, _, union = user_union(ui_model, index, corpus, history, N, beta, user=user,
                                  m_u=m_u, neighbors=neighbors)
    if len(union) == 0:
        return union.items, np.zeros(0)
    X = feature_matrix(m_u, ui_model.P[union.items], normalize_scores(union.ui), normalize_scores(union.uu))
    return union.items, fusion_forward(net, X).astype(np.float64)


def sccf_candidates(net: FusionNet, ui_model, index: UserIndex, corpus: Corpus, u: int, N: int,
                    beta: int = 100, history=None) -> ScoredCandidateList:
    history = corpus.history(u) if history is None else history
    items, logits = sccf_scores(net, ui_model, index, corpus, history, N, beta, user=u)
    if items.size == 0:
        return ScoredCandidateList.empty()
    order = np.lexsort((items, -logits))[:N]
    return ScoredCandidateList(items[order], logits[order])


def save_fusion(path, net: FusionNet) -> None:
    save_store(path, net.store)


def load_fusion(path) -> FusionNet:
    store, _ = load_store(path)
    return FusionNet(store)

"""Left-to-right self-attentive sequential recommender with manual backprop.

Batches are left-padded integer arrays with -1 marking padding. Padded keys
are masked out of attention and padded positions carry no loss, so the
outputs for real positions do not depend on how much padding a batch uses.
Position embeddings are indexed from the start of each (truncated) window.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, sample_negatives
from .numerics import (AdamConfig, DecaySchedule, ParameterStore, SeededRng, adam_step, add_l2,
                       dropout_mask, layer_norm, layer_norm_backward, log_sigmoid, sigmoid,
                       softmax_rows, softmax_rows_backward, truncated_normal_init)
from .ranking import ScoredCandidateList, ranked_list

_log = logging.getLogger(__name__)


@dataclass
class SasrecConfig:
    maxlen: int = 200
    dim: int = 64
    layers: int = 2
    heads: int = 1
    dropout: float = 0.2
    neg_per_pos: int = 1
    ffn_dim: int = 0  # 0 means same as dim
    batch_size: int = 128
    l2: float = 0.0
    ln_eps: float = 1e-8

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"sasrec.dim ({self.dim}) must be divisible by sasrec.heads ({self.heads})")


LAYER_PARAMS = ("wq", "wk", "wv", "wo", "ffn1", "ffn1b", "ffn2", "ffn2b",
                "ln1g", "ln1b", "ln2g", "ln2b")


@dataclass
class SasrecModel:
    store: ParameterStore
    cfg: SasrecConfig
    kind: str = field(default="sasrec", init=False)

    @classmethod
    def init(cls, n_items: int, cfg: SasrecConfig, rng: SeededRng) -> "SasrecModel":
        d, f = cfg.dim, cfg.ffn_dim or cfg.dim
        s = ParameterStore()
        s.add("sasrec.P", truncated_normal_init((n_items, d), rng=rng))
        s.add("sasrec.E", truncated_normal_init((cfg.maxlen, d), rng=rng))
        for k in range(cfg.layers):
            p = f"sasrec.l{k}."
            for w in ("wq", "wk", "wv", "wo"):
                s.add(p + w, truncated_normal_init((d, d), rng=rng))
            s.add(p + "ffn1", truncated_normal_init((d, f), rng=rng))
            s.add(p + "ffn1b", np.zeros(f, dtype=np.float32))
            s.add(p + "ffn2", truncated_normal_init((f, d), rng=rng))
            s.add(p + "ffn2b", np.zeros(d, dtype=np.float32))
            for ln in ("ln1", "ln2"):
                s.add(p + ln + "g", np.ones(d, dtype=np.float32))
                s.add(p + ln + "b", np.zeros(d, dtype=np.float32))
        return cls(s, cfg)

    @property
    def P(self) -> np.ndarray:
        return self.store["sasrec.P"]

    @property
    def E(self) -> np.ndarray:
        return self.store["sasrec.E"]

    @property
    def dim(self) -> int:
        return self.P.shape[1]

    def layer(self, k: int) -> dict[str, np.ndarray]:
        return {w: self.store[f"sasrec.l{k}.{w}"] for w in LAYER_PARAMS}

    def user_repr(self, history) -> np.ndarray:
        return sasrec_user_repr(self, history)

    def user_reprs(self, histories, batch_size: int = 256) -> np.ndarray:
        out = np.zeros((len(histories), self.dim), dtype=self.P.dtype)
        rows = [r for r, h in enumerate(histories) if len(h)]
        for start in range(0, len(rows), batch_size):
            chunk = rows[start:start + batch_size]
            seqs = pad_left([histories[r] for r in chunk], self.cfg.maxlen)
            y, _ = forward(self, seqs, training=False)
            out[chunk] = y[:, -1]
        return out


def pad_left(seqs, maxlen: int) -> np.ndarray:
    """Truncate each sequence to its last ``maxlen`` items and left-pad with -1."""
    seqs = [np.asarray(s, dtype=np.int64)[-maxlen:] for s in seqs]
    T = max((len(s) for s in seqs), default=1) or 1
    out = np.full((len(seqs), T), -1, dtype=np.int64)
    for r, s in enumerate(seqs):
        if len(s):
            out[r, T - len(s):] = s
    return out


def _positions(valid: np.ndarray) -> np.ndarray:
    npad = valid.shape[1] - valid.sum(axis=1)
    return np.maximum(np.arange(valid.shape[1])[None, :] - npad[:, None], 0)


def embed_sequence(model: SasrecModel, seq) -> np.ndarray:
    seq = np.asarray(seq, dtype=np.int64)
    if seq.size == 0:
        raise ValueError("empty sequence")
    seq = seq[-model.cfg.maxlen:]
    return model.P[seq] + model.E[: seq.size]


def _split_heads(x, h):
    B, T, d = x.shape
    return x.reshape(B, T, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, h, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, h * dh)


def _attention_mask(valid: np.ndarray) -> np.ndarray:
    """[B,1,T,T] boolean: key j visible to query i iff j <= i and j is real (self always)."""
    T = valid.shape[1]
    causal = np.tril(np.ones((T, T), dtype=bool))
    allowed = causal[None] & valid[:, None, :]
    allowed |= np.eye(T, dtype=bool)[None]
    return allowed[:, None]


def attention(Q, K, V, causal: bool = True, allowed=None):
    """softmax(QK^T / sqrt(d_h) + mask) V over the last two axes."""
    dh = Q.shape[-1]
    S = Q @ np.swapaxes(K, -1, -2) / np.sqrt(dh).astype(Q.dtype)
    if allowed is None and causal:
        T = Q.shape[-2]
        allowed = np.tril(np.ones((T, T), dtype=bool))
    if allowed is not None:
        S = np.where(allowed, S, -np.inf)
    A = softmax_rows(S)
    return A @ V, A


def _block_forward(lp, X, allowed, heads, eps, drop1, drop2):
    Q, K, V = X @ lp["wq"], X @ lp["wk"], X @ lp["wv"]
    Qh, Kh, Vh = (_split_heads(t, heads) for t in (Q, K, V))
    Oh, A = attention(Qh, Kh, Vh, allowed=allowed)
    O = _merge_heads(Oh)
    Z = O @ lp["wo"]
    Y1, c1 = layer_norm(X + drop1 * Z, lp["ln1g"], lp["ln1b"], eps)
    F1 = Y1 @ lp["ffn1"] + lp["ffn1b"]
    Hh = np.maximum(F1, 0)
    F = Hh @ lp["ffn2"] + lp["ffn2b"]
    Y2, c2 = layer_norm(Y1 + drop2 * F, lp["ln2g"], lp["ln2b"], eps)
    cache = (X, Qh, Kh, Vh, A, O, Z, Y1, c1, F1, Hh, c2, drop1, drop2)
    return Y2, cache


def _block_backward(lp, dY2, cache, heads):
    X, Qh, Kh, Vh, A, O, Z, Y1, c1, F1, Hh, c2, drop1, drop2 = cache
    g = {}
    dR2, g["ln2g"], g["ln2b"] = layer_norm_backward(dY2, c2)
    dF = dR2 * drop2
    g["ffn2"] = np.einsum("btf,btd->fd", Hh, dF)
    g["ffn2b"] = dF.sum(axis=(0, 1))
    dF1 = (dF @ lp["ffn2"].T) * (F1 > 0)
    g["ffn1"] = np.einsum("btd,btf->df", Y1, dF1)
    g["ffn1b"] = dF1.sum(axis=(0, 1))
    dY1 = dR2 + dF1 @ lp["ffn1"].T
    dR1, g["ln1g"], g["ln1b"] = layer_norm_backward(dY1, c1)
    dZ = dR1 * drop1
    g["wo"] = np.einsum("btd,bte->de", O, dZ)
    dOh = _split_heads(dZ @ lp["wo"].T, heads)
    dA = dOh @ np.swapaxes(Vh, -1, -2)
    dVh = np.swapaxes(A, -1, -2) @ dOh
    dS = softmax_rows_backward(A, dA) / np.sqrt(Qh.shape[-1]).astype(A.dtype)
    dQh = dS @ Kh
    dKh = np.swapaxes(dS, -1, -2) @ Qh
    dQ, dK, dV = _merge_heads(dQh), _merge_heads(dKh), _merge_heads(dVh)
    g["wq"] = np.einsum("btd,bte->de", X, dQ)
    g["wk"] = np.einsum("btd,bte->de", X, dK)
    g["wv"] = np.einsum("btd,bte->de", X, dV)
    dX = dR1 + dQ @ lp["wq"].T + dK @ lp["wk"].T + dV @ lp["wv"].T
    return dX, g


def forward(model: SasrecModel, seqs: np.ndarray, training: bool = False,
            rng: SeededRng | None = None):
    """Run the encoder on a padded batch [B,T]; returns ([B,T,d] outputs, cache)."""
    cfg = model.cfg
    valid = seqs >= 0
    pos = _positions(valid)
    idx = np.where(valid, seqs, 0)
    vmask = valid[..., None].astype(model.P.dtype)
    X = (model.P[idx] + model.E[pos]) * vmask
    rate = cfg.dropout if training else 0.0
    dt = model.P.dtype

    def mask():
        return dropout_mask(X.shape, rate, rng, training and rate > 0, dtype=dt)

    d0 = mask()
    X = X * d0
    allowed = _attention_mask(valid)
    caches = []
    for k in range(cfg.layers):
        X, c = _block_forward(model.layer(k), X, allowed, cfg.heads, cfg.ln_eps, mask(), mask())
        caches.append(c)
    return X, (idx, pos, vmask, d0, caches)


def backward(model: SasrecModel, dout: np.ndarray, cache) -> dict[str, np.ndarray]:
    idx, pos, vmask, d0, caches = cache
    grads: dict[str, np.ndarray] = {}
    dX = dout
    for k in reversed(range(model.cfg.layers)):
        dX, g = _block_backward(model.layer(k), dX, caches[k], model.cfg.heads)
        for w, v in g.items():
            grads[f"sasrec.l{k}.{w}"] = v
    dX0 = dX * d0 * vmask
    valid = vmask[..., 0] > 0
    dP = np.zeros_like(model.P)
    np.add.at(dP, idx[valid], dX0[valid])
    dE = np.zeros_like(model.E)
    np.add.at(dE, pos[valid], dX0[valid])
    grads["sasrec.P"] = dP
    grads["sasrec.E"] = dE
    return grads


def self_attention_block(model: SasrecModel, layer: int, X: np.ndarray, training: bool = False,
                         rng: SeededRng | None = None) -> np.ndarray:
    """Multi-head masked self-attention wrapped as LayerNorm(X + Dropout(MHA(X))) for [t,d] input."""
    lp = model.layer(layer)
    cfg = model.cfg
    Xb = X[None]
    allowed = _attention_mask(np.ones((1, X.shape[0]), dtype=bool))
    Qh, Kh, Vh = (_split_heads(Xb @ lp[w], cfg.heads) for w in ("wq", "wk", "wv"))
    Oh, _ = attention(Qh, Kh, Vh, allowed=allowed)
    Z = _merge_heads(Oh) @ lp["wo"]
    drop = dropout_mask(Z.shape, cfg.dropout, rng, training, dtype=X.dtype) if training else 1.0
    return layer_norm(Xb + drop * Z, lp["ln1g"], lp["ln1b"], cfg.ln_eps)[0][0]


def pffn_block(model: SasrecModel, layer: int, X: np.ndarray, training: bool = False,
               rng: SeededRng | None = None) -> np.ndarray:
    lp = model.layer(layer)
    F = np.maximum(X @ lp["ffn1"] + lp["ffn1b"], 0) @ lp["ffn2"] + lp["ffn2b"]
    drop = dropout_mask(F.shape, model.cfg.dropout, rng, training, dtype=X.dtype) if training else 1.0
    return layer_norm(X + drop * F, lp["ln2g"], lp["ln2b"], model.cfg.ln_eps)[0]


def sasrec_user_repr(model: SasrecModel, seq) -> np.ndarray:
    seq = np.asarray(seq, dtype=np.int64)
    if seq.size == 0:
        raise ValueError("empty sequence")
    out, _ = forward(model, seq[-model.cfg.maxlen:][None], training=False)
    return out[0, -1]


def make_batch(histories, maxlen: int, neg_per_pos: int, n_items: int, rng: SeededRng):
    """Shifted next-item batch: inputs, targets (-1 on padding) and [B,T,k] negatives."""
    inputs = pad_left([h[:-1] for h in histories], maxlen)
    targets = pad_left([h[1:] for h in histories], maxlen)
    B, T = inputs.shape
    negs = np.zeros((B, T, neg_per_pos), dtype=np.int64)
    for r, h in enumerate(histories):
        negs[r] = sample_negatives(rng, n_items, np.asarray(h), (T, neg_per_pos))
    return inputs, targets, negs


def sasrec_batch_loss(model: SasrecModel, inputs, targets, negs, training: bool = False,
                      rng: SeededRng | None = None, l2: float = 0.0, with_grad: bool = True):
    """Negative-sampled binary cross-entropy over all real positions.

    Returns (loss, n_instances, grads); grads is None when ``with_grad`` is False.
    """
    out, cache = forward(model, inputs, training, rng)
    P = model.P
    live = targets >= 0
    tgt = np.where(live, targets, 0)
    w = live.astype(P.dtype)
    x_pos = np.einsum("btd,btd->bt", out, P[tgt])
    Pn = P[negs]
    x_neg = np.einsum("btd,btkd->btk", out, Pn)
    M = int(live.sum()) * (1 + negs.shape[-1])
    loss = -(np.sum(log_sigmoid(x_pos) * w, dtype=np.float64)
             + np.sum(log_sigmoid(-x_neg) * w[..., None], dtype=np.float64)) / M
    if not with_grad:
        return float(loss + (l2 * model.store.l2_norm_sq() if l2 else 0.0)), M, None
    g_pos = ((sigmoid(x_pos) - 1.0) * w / M).astype(P.dtype)
    g_neg = (sigmoid(x_neg) * w[..., None] / M).astype(P.dtype)
    dout = g_pos[..., None] * P[tgt] + np.einsum("btk,btkd->btd", g_neg, Pn)
    grads = backward(model, dout.astype(P.dtype), cache)
    dP = grads["sasrec.P"]
    np.add.at(dP, tgt[live], (g_pos[..., None] * out)[live])
    np.add.at(dP, negs.reshape(-1), (g_neg[..., None] * out[:, :, None, :]).reshape(-1, P.shape[1]))
    loss += add_l2(model.store, grads, l2)
    return float(loss), M, grads


def sasrec_epoch_steps(corpus: Corpus, batch_size: int) -> int:
    n = sum(1 for u in range(corpus.n_users) if len(corpus.history(u)) >= 2)
    return -(-n // batch_size)


def sasrec_train_epoch(model: SasrecModel, corpus: Corpus, rng: SeededRng,
                       adam: AdamConfig | None = None,
                       decay: DecaySchedule | None = None) -> float:
    """One pass over users in seeded random order, one Adam step per batch of sequences."""
    cfg = model.cfg
    adam = adam or AdamConfig(l2=cfg.l2)
    users = [u for u in rng.permutation(corpus.n_users) if len(corpus.history(u)) >= 2]
    total, count = 0.0, 0
    for start in range(0, len(users), cfg.batch_size):
        hs = [corpus.history(u) for u in users[start:start + cfg.batch_size]]
        inputs, targets, negs = make_batch(hs, cfg.maxlen, cfg.neg_per_pos, corpus.n_items, rng)
        penalty = adam.l2 * model.store.l2_norm_sq() if adam.l2 else 0.0
        loss, M, grads = sasrec_batch_loss(model, inputs, targets, negs, True, rng, adam.l2)
        adam_step(model.store, grads, adam.lr, adam.beta1, adam.beta2, adam.eps, decay)
        total += (loss - penalty) * M
        count += M
    return total / max(count, 1)


def sasrec_candidates(model: SasrecModel, corpus: Corpus, user: int, N: int,
                      history=None) -> ScoredCandidateList:
    h = corpus.history(user) if history is None else np.asarray(history)
    m_u = model.user_repr(h)
    return ranked_list(model.P @ m_u, N, exclude=h)

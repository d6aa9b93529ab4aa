"""Synthetic implicit-feedback corpora for benchmarks and end-to-end tests."""

from __future__ import annotations

import numpy as np

from .corpus import Corpus, corpus_from_sequences, leave_one_out
from .numerics import seeded_rng


def random_histories(n_users: int, n_items: int, avg_len: int = 160, seed: int = 0,
                     min_len: int = 5) -> Corpus:
    """Popularity-skewed random histories with leave-one-out split.

    History lengths do not depend on ``n_items``, so vocabularies of different
    sizes differ only in how sparse each user's item vector is.
    """
    rng = seeded_rng(seed)
    lengths = np.clip(rng.geometric(1.0 / max(avg_len - min_len, 1), size=n_users) + min_len,
                      min_len, min(n_items - 1, 20 * avg_len))
    seqs = []
    for n in lengths.tolist():
        draw = (n_items * rng.random(3 * n) ** 1.5).astype(np.int64)
        _, first = np.unique(draw, return_index=True)
        picked = draw[np.sort(first)][:n]
        while picked.size < n:
            extra = rng.integers(0, n_items, size=n)
            merged = np.concatenate([picked, extra])
            _, first = np.unique(merged, return_index=True)
            picked = merged[np.sort(first)][:n]
        seqs.append(picked)
    return leave_one_out(corpus_from_sequences(seqs, n_items))


def clustered_corpus(n_users: int = 300, n_items: int = 120, n_clusters: int = 6,
                     min_len: int = 8, max_len: int = 30, noise: float = 0.15,
                     seed: int = 0) -> Corpus:
    """Users walk forward along an item chain inside one taste cluster.

    The next item is usually one or two steps further along the user's chain,
    occasionally a random item, so both co-occurrence and order carry signal.
    """
    rng = seeded_rng(seed)
    chains = [np.flatnonzero(np.arange(n_items) % n_clusters == c) for c in range(n_clusters)]
    seqs = []
    for _ in range(n_users):
        chain = chains[int(rng.integers(n_clusters))]
        pos = int(rng.integers(len(chain)))
        want = int(rng.integers(min_len, max_len + 1))
        seq: list[int] = []
        seen: set[int] = set()
        guard = 0
        while len(seq) < want and guard < 20 * want:
            guard += 1
            if rng.random() < noise:
                item = int(rng.integers(n_items))
            else:
                pos = (pos + 1 + int(rng.random() < 0.3)) % len(chain)
                item = int(chain[pos])
            if item not in seen:
                seen.add(item)
                seq.append(item)
        seqs.append(seq)
    return leave_one_out(corpus_from_sequences(seqs, n_items))

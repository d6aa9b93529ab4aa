"""Exact top-N selection shared by every scorer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ScoredCandidateList:
    items: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(zip(self.items.tolist(), self.scores.tolist()))

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.items.tolist(), self.scores.tolist()))

    @classmethod
    def empty(cls) -> "ScoredCandidateList":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0))


def top_n(scores: np.ndarray, n: int, candidates: np.ndarray | None = None) -> np.ndarray:
    """Indices of the ``n`` highest scores, descending, ties by lower index.

    ``candidates`` restricts the universe (an index array or boolean mask).
    Selection uses a partition plus an exact tie pass at the cut-off value, so
    the result always equals a full (-score, index) sort truncated to ``n``.
    """
    scores = np.asarray(scores)
    if candidates is None:
        idx = np.arange(scores.shape[0])
    else:
        candidates = np.asarray(candidates)
        idx = np.flatnonzero(candidates) if candidates.dtype == bool else np.sort(candidates)
    if n <= 0 or idx.size == 0:
        return np.zeros(0, dtype=np.int64)
    s = scores[idx]
    if n >= idx.size:
        order = np.lexsort((idx, -s))
        return idx[order].astype(np.int64)
    cut = np.partition(s, idx.size - n)[idx.size - n]
    above = idx[s > cut]
    ties = idx[s == cut][: n - above.size]
    pick = np.concatenate([above, ties])
    ps = scores[pick]
    return pick[np.lexsort((pick, -ps))].astype(np.int64)


def exclusion_mask(n_items: int, exclude) -> np.ndarray:
    mask = np.ones(n_items, dtype=bool)
    if exclude is not None and len(exclude):
        mask[np.asarray(exclude, dtype=np.int64)] = False
    return mask


def ranked_list(scores: np.ndarray, n: int, exclude=None) -> ScoredCandidateList:
    """Top-n over all items minus ``exclude`` as a ScoredCandidateList."""
    picked = top_n(scores, n, exclusion_mask(scores.shape[0], exclude))
    return ScoredCandidateList(picked, np.asarray(scores, dtype=np.float64)[picked])

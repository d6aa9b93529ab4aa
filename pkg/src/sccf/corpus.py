"""Raw log ingestion, k-core preprocessing, chronological sequences and
leave-one-out splits."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .numerics import load_container, save_container

_log = logging.getLogger(__name__)


class CorpusFormatError(ValueError):
    pass


class CorpusEmptyError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class Interaction:
    user: str
    item: str
    value: float
    timestamp: int


@dataclass
class CorpusStats:
    n_users: int
    n_items: int
    n_actions: int
    avg_length: float
    density: float

    HEADER = "dataset\tusers\titems\tactions\tavg_length\tdensity"

    def tsv_row(self, name: str) -> str:
        return (f"{name}\t{self.n_users}\t{self.n_items}\t{self.n_actions}\t"
                f"{self.avg_length:.1f}\t{100 * self.density:.2f}%")


@dataclass
class Corpus:
    """Dense-indexed chronological sequences plus an optional leave-one-out split.

    ``train[u]`` is the training prefix; ``valid[u]``/``test[u]`` hold the
    held-out item or -1 for users excluded from the split. In final mode the
    validation item is merged into ``train`` and ``valid`` is all -1.
    """

    user_ids: list[str]
    item_ids: list[str]
    sequences: list[np.ndarray]
    timestamps: list[np.ndarray]
    train: list[np.ndarray] = field(default_factory=list)
    valid: np.ndarray | None = None
    test: np.ndarray | None = None
    final: bool = False

    def __post_init__(self):
        self.user_index = {u: i for i, u in enumerate(self.user_ids)}
        self.item_index = {it: i for i, it in enumerate(self.item_ids)}

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def has_split(self) -> bool:
        return self.test is not None

    def history(self, u: int) -> np.ndarray:
        """Items visible to the models for user u (the training prefix once split)."""
        return self.train[u] if self.has_split else self.sequences[u]

    def evaluable_users(self, target: str = "test") -> np.ndarray:
        arr = self.test if target == "test" else self.valid
        return np.flatnonzero(arr >= 0)

    def stats(self) -> CorpusStats:
        n_actions = int(sum(len(s) for s in self.sequences))
        return CorpusStats(self.n_users, self.n_items, n_actions,
                           n_actions / max(self.n_users, 1),
                           n_actions / max(self.n_users * self.n_items, 1))

    def item_counts(self) -> np.ndarray:
        """Interaction count per item over the visible histories."""
        counts = np.zeros(self.n_items, dtype=np.int64)
        for u in range(self.n_users):
            np.add.at(counts, self.history(u), 1)
        return counts

    def to_interactions(self) -> list[Interaction]:
        """Events in user-major chronological order; re-preprocessing them is a no-op."""
        out = []
        for u, (seq, ts) in enumerate(zip(self.sequences, self.timestamps)):
            uid = self.user_ids[u]
            out.extend(Interaction(uid, self.item_ids[i], 1, int(t)) for i, t in zip(seq, ts))
        return out


def _parse_error(path, lineno, line, why):
    return CorpusFormatError(f"{path}: line {lineno}: {why}: {line.rstrip()!r}")


def load_movielens(path) -> list[Interaction]:
    """Read ML-1M ``user::item::rating::timestamp`` or ML-20M CSV ratings."""
    out: list[Interaction] = []
    with open(path, encoding="latin-1") as f:
        first = True
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            if first and line.lower().startswith("userid"):
                first = False
                continue
            first = False
            parts = line.rstrip("\r\n").split("::") if "::" in line else line.rstrip("\r\n").split(",")
            if len(parts) != 4:
                raise _parse_error(path, lineno, line, "expected 4 fields")
            try:
                rating = float(parts[2])
                value = int(rating) if rating.is_integer() else rating
                out.append(Interaction(parts[0], parts[1], value, int(parts[3])))
            except ValueError as e:
                raise _parse_error(path, lineno, line, str(e)) from None
    return out


def load_amazon(path) -> list[Interaction]:
    """Read Amazon ratings-only CSV ``user,item,rating,timestamp`` (header optional)."""
    out: list[Interaction] = []
    with open(path, newline="", encoding="utf-8") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row:
                continue
            if len(row) != 4:
                raise _parse_error(path, lineno, ",".join(row), "expected 4 columns")
            if lineno == 1 and row[3].strip().lower() in {"timestamp", "time", "unixreviewtime"}:
                continue
            try:
                out.append(Interaction(row[0], row[1], float(row[2]), int(float(row[3]))))
            except ValueError as e:
                raise _parse_error(path, lineno, ",".join(row), str(e)) from None
    return out


def load_dataset(kind: str, path) -> list[Interaction]:
    kind = kind.lower()
    if kind in {"ml-1m", "ml-20m", "movielens", "ml1m", "ml20m"}:
        return load_movielens(path)
    if kind in {"amazon", "games", "beauty", "videos"}:
        return load_amazon(path)
    raise ValueError(f"unknown dataset kind {kind!r}")


def preprocess(raw: list[Interaction], k: int = 5) -> Corpus:
    """Binarize, collapse duplicates, k-core filter, then one more user pass.

    Duplicate (user, item) events keep the earliest occurrence (timestamp, then
    input order). Users are indexed by first appearance in the input; items by
    first appearance when walking users in index order, chronologically.
    """
    if not raw:
        raise CorpusEmptyError("corpus empty: no interactions")
    df = pd.DataFrame({
        "user": [r.user for r in raw],
        "item": [r.item for r in raw],
        "ts": np.fromiter((r.timestamp for r in raw), dtype=np.int64, count=len(raw)),
    })
    df["order"] = np.arange(len(df), dtype=np.int64)
    # every remaining event counts as a positive; explicit values are dropped here
    df = df.sort_values(["user", "item", "ts", "order"], kind="stable")
    df = df.drop_duplicates(["user", "item"], keep="first")

    while True:
        n = len(df)
        ucount = df.groupby("user")["item"].transform("size")
        icount = df.groupby("item")["user"].transform("size")
        df = df[(ucount >= k) & (icount >= k)]
        if len(df) == n:
            break
    ucount = df.groupby("user")["item"].transform("size")
    df = df[ucount >= k]
    if df.empty:
        raise CorpusEmptyError(f"corpus empty after {k}-core filtering")

    df = df.sort_values("order", kind="stable")
    user_codes, user_ids = pd.factorize(df["user"], sort=False)
    df = df.assign(uidx=user_codes).sort_values(["uidx", "ts", "order"], kind="stable")
    item_codes, item_ids = pd.factorize(df["item"], sort=False)
    bounds = np.flatnonzero(np.diff(df["uidx"].to_numpy())) + 1
    seqs = np.split(item_codes.astype(np.int32), bounds)
    times = np.split(df["ts"].to_numpy(), bounds)
    return Corpus([str(u) for u in user_ids], [str(i) for i in item_ids], seqs, times)


def leave_one_out(corpus: Corpus, final: bool = False) -> Corpus:
    """Populate the split: test = last item, validation = second to last.

    ``final=True`` merges the validation item back into the training prefix.
    Users with fewer than 3 events are excluded from evaluation.
    """
    n = corpus.n_users
    valid = np.full(n, -1, dtype=np.int64)
    test = np.full(n, -1, dtype=np.int64)
    train: list[np.ndarray] = []
    short = 0
    for u, seq in enumerate(corpus.sequences):
        if len(seq) < 3:
            short += 1
            train.append(seq.copy())
            continue
        test[u] = seq[-1]
        if final:
            train.append(seq[:-1].copy())
        else:
            valid[u] = seq[-2]
            train.append(seq[:-2].copy())
    if short:
        _log.warning("%d users with fewer than 3 interactions excluded from the split", short)
    corpus.train, corpus.valid, corpus.test, corpus.final = train, valid, test, final
    return corpus


def with_split(corpus: Corpus, final: bool) -> Corpus:
    """Shallow copy sharing sequences but carrying its own split."""
    c = Corpus(corpus.user_ids, corpus.item_ids, corpus.sequences, corpus.timestamps)
    return leave_one_out(c, final=final)


def save_corpus(path, corpus: Corpus) -> None:
    lengths = np.array([len(s) for s in corpus.sequences], dtype=np.float32)
    flat = np.concatenate(corpus.sequences).astype(np.float32)
    ts = np.concatenate(corpus.timestamps).astype(np.int64)
    save_container(path, {
        "corpus.lengths": lengths,
        "corpus.items": flat,
        "corpus.ts_hi": (ts >> 16).astype(np.float32),
        "corpus.ts_lo": (ts & 0xFFFF).astype(np.float32),
    }, strings={"corpus.users": corpus.user_ids, "corpus.items": corpus.item_ids})


def load_corpus(path, split: bool = True, final: bool = False) -> Corpus:
    tensors, strings, _ = load_container(path)
    lengths = tensors["corpus.lengths"].astype(np.int64)
    bounds = np.cumsum(lengths)[:-1]
    seqs = np.split(tensors["corpus.items"].astype(np.int32), bounds)
    ts = (tensors["corpus.ts_hi"].astype(np.int64) << 16) + tensors["corpus.ts_lo"].astype(np.int64)
    corpus = Corpus(strings["corpus.users"], strings["corpus.items"], seqs, np.split(ts, bounds))
    return leave_one_out(corpus, final=final) if split else corpus


def corpus_from_sequences(sequences: list[list[int]], n_items: int | None = None) -> Corpus:
    """Build a corpus straight from index sequences (tests and synthetic data)."""
    seqs = [np.asarray(s, dtype=np.int32) for s in sequences]
    m = n_items if n_items is not None else int(max(int(s.max()) for s in seqs if len(s)) + 1)
    return Corpus([f"u{i}" for i in range(len(seqs))], [f"i{j}" for j in range(m)], seqs,
                  [np.arange(len(s), dtype=np.int64) for s in seqs])


def sample_negatives(rng, n_items: int, positives: np.ndarray, size) -> np.ndarray:
    """Uniform draws with replacement from items not in ``positives``."""
    pos = np.zeros(n_items, dtype=bool)
    pos[positives] = True
    if pos.all():
        raise ValueError("user has interacted with every item; no negatives available")
    out = rng.integers(0, n_items, size=size)
    bad = pos[out]
    while bad.any():
        out[bad] = rng.integers(0, n_items, size=int(bad.sum()))
        bad = pos[out]
    return out

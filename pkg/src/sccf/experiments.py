"""Reference experiment drivers shared by scripts/ and the acceptance tests."""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import engine
from .corpus import CorpusStats, load_dataset, preprocess, with_split
from .evalharness import EvalReport, evaluate, pop_scorer, userknn_scorer
from .neighborhood import UserKNNIndex

_log = logging.getLogger(__name__)

# reference post-filter statistics: users, items, rounded action count, avg length, density %
REFERENCE_STATS = {
    "ml-1m": (6040, 3416, "1.0M", 163.5, 4.79),
    "games": (29341, 23464, "0.3M", 9.1, 0.04),
    "beauty": (40226, 54542, "0.4M", 8.8, 0.02),
}

# env var -> dataset kind; the default locations are tried when the variable is unset
DATA_ENV = {"ml-1m": "SCCF_ML1M", "games": "SCCF_GAMES", "beauty": "SCCF_BEAUTY"}
DATA_DEFAULTS = {
    "ml-1m": ["data/ml-1m/ratings.dat", "/root/data/ml-1m/ratings.dat"],
    "games": ["data/ratings_Video_Games.csv", "/root/data/ratings_Video_Games.csv"],
    "beauty": ["data/ratings_Beauty.csv", "/root/data/ratings_Beauty.csv"],
}


def find_dataset(kind: str) -> Path | None:
    env = os.environ.get(DATA_ENV[kind])
    candidates = [env] if env else DATA_DEFAULTS[kind]
    for c in candidates:
        if c and Path(c).is_file():
            return Path(c)
    return None


def reference_stats_check(kind: str, path) -> tuple[bool, CorpusStats]:
    """Preprocess a raw log and compare the user and item counts with the reference row.

    Average length and density are reported, not gated: the reference values
    match counting only the training prefix (two held-out items removed per user).
    """
    stats = preprocess(load_dataset(kind, path)).stats()
    users, items = REFERENCE_STATS[kind][:2]
    return stats.n_users == users and stats.n_items == items, stats


def ml1m_config(model: str) -> engine.EngineConfig:
    """Reference ML-1M settings: FISM d=128 alpha=0.5; SASRec d=64, 2 layers, 1 head, L=200."""
    cfg = engine.EngineConfig(dataset="ml-1m", model=model)
    cfg.fism.dim, cfg.fism.alpha = 128, 0.5
    cfg.sasrec.dim, cfg.sasrec.layers, cfg.sasrec.heads, cfg.sasrec.maxlen = 64, 2, 1, 200
    cfg.sasrec.dropout = 0.2
    cfg.uu.beta = 100
    cfg.fusion.N = 100
    return cfg


@dataclass
class EffectivenessResult:
    model: str
    ui: EvalReport
    sccf: EvalReport
    uu: EvalReport | None = None
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def rows(self) -> list[str]:
        out = []
        for name, rep in (("ui", self.ui), ("uu", self.uu), ("sccf", self.sccf)):
            if rep is None:
                continue
            for k in sorted(rep.hr):
                out.append(f"{self.model}\t{name}\t{k}\t{rep.hr[k]:.4f}\t{rep.ndcg[k]:.4f}")
        return out


def run_effectiveness(corpus, model: str, cfg: engine.EngineConfig | None = None,
                      modes=("ui", "uu", "sccf")) -> EffectivenessResult:
    cfg = cfg or ml1m_config(model)
    cfg.model = model
    t0 = time.perf_counter()
    res = engine.run_pipeline(cfg, corpus, modes)
    reps = res["reports"]
    return EffectivenessResult(model, reps["ui"], reps["sccf"], reps.get("uu"),
                               time.perf_counter() - t0, {"fit_log": res["fit_log"],
                                                          "fusion_log": res["fusion_log"]})


def baseline_reports(corpus, beta: int = 100) -> dict[str, EvalReport]:
    final = with_split(corpus, final=True)
    knn = UserKNNIndex([final.history(u) for u in range(final.n_users)], final.n_items)
    return {"pop": evaluate(pop_scorer(final.item_counts()), final),
            "userknn": evaluate(userknn_scorer(knn, beta), final)}

"""Configuration, checkpoint lifecycle, pipeline stages and the real-time serve loop."""

from __future__ import annotations

import dataclasses
import logging
import socketserver
import threading
import time
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Corpus, with_split
from .evalharness import EvalReport, evaluate, sccf_scorer, ui_scorer, uu_scorer
from .fism import FismConfig, FismModel, fism_epoch_steps, fism_train_epoch
from .fusion import FusionConfig, FusionNet, FusionTrainLog, fusion_train, sccf_candidates
from .neighborhood import UserIndex, UUConfig, build_user_index, top_beta_neighbors
from .numerics import (AdamConfig, DecaySchedule, ParameterStore, load_container, load_store, save_container,
                       save_store, seeded_rng)
from .sasrec import SasrecConfig, SasrecModel, sasrec_epoch_steps, sasrec_train_epoch

_log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    eval_every: int = 5
    patience: int = 3
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    linear_decay: bool = True
    eval_users: int = 0  # 0 = all validation users
    final_retrain: bool = True
    final_epochs: int = 5  # warm-started passes over train+validation


@dataclass
class EngineConfig:
    dataset: str = "ml-1m"
    data_path: str = ""
    model: str = "sasrec"
    seed: int = 42
    output_dir: str = "runs"
    train: TrainConfig = field(default_factory=TrainConfig)
    fism: FismConfig = field(default_factory=FismConfig)
    sasrec: SasrecConfig = field(default_factory=SasrecConfig)
    uu: UUConfig = field(default_factory=UUConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def resolved(self) -> list[str]:
        """Every key as ``key = value``, sections flattened."""
        out = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                out += [f"{f.name}.{g.name} = {_fmt(getattr(v, g.name))}" for g in dataclasses.fields(v)]
            else:
                out.append(f"{f.name} = {_fmt(v)}")
        return out


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v).lower() if isinstance(v, bool) else str(v)


def _coerce(raw: str, tp):
    origin = typing.get_origin(tp)
    if origin is tuple:
        inner = typing.get_args(tp)[0]
        return tuple(_coerce(x.strip(), inner) for x in raw.split(",") if x.strip())
    if tp is bool:
        low = raw.lower()
        if low in {"true", "1", "yes", "on"}:
            return True
        if low in {"false", "0", "no", "off"}:
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    return raw


def apply_setting(cfg: EngineConfig, key: str, raw: str, where: str = "") -> None:
    prefix = f"{where}: " if where else ""
    parts = key.split(".")
    target = cfg
    for part in parts[:-1]:
        if not hasattr(target, part) or not dataclasses.is_dataclass(getattr(target, part)):
            raise ConfigError(f"{prefix}unknown key {key!r}")
        target = getattr(target, part)
    name = parts[-1]
    hints = typing.get_type_hints(type(target))
    if name not in {f.name for f in dataclasses.fields(target)} or dataclasses.is_dataclass(getattr(target, name)):
        raise ConfigError(f"{prefix}unknown key {key!r}")
    tp = hints[name]
    if typing.get_origin(tp) is typing.Union or type(tp).__name__ == "UnionType":
        tp = next(a for a in typing.get_args(tp) if a is not type(None))
    try:
        setattr(target, name, _coerce(raw, tp))
    except ValueError as e:
        raise ConfigError(f"{prefix}key {key!r}: {e}") from None
    if hasattr(target, "__post_init__"):
        try:
            target.__post_init__()
        except ValueError as e:
            raise ConfigError(f"{prefix}{e}") from None


def parse_config(text: str, cfg: EngineConfig | None = None, source: str = "<config>") -> EngineConfig:
    cfg = cfg or EngineConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        apply_setting(cfg, key, raw, f"{source}: line {lineno}")
    return cfg


def load_config(path) -> EngineConfig:
    return parse_config(Path(path).read_text(), source=str(path))


# --- checkpoints ---------------------------------------------------------------


def _section_lines(obj) -> list[str]:
    return [f"{f.name}={_fmt(getattr(obj, f.name))}" for f in dataclasses.fields(obj)]


def save_ui_model(path, model) -> None:
    if model.kind == "fism":
        meta = [f"alpha={model.alpha}", f"window={model.window or 0}"]
    else:
        meta = _section_lines(model.cfg)
    save_store(path, model.store, strings={"model.kind": [model.kind], "model.config": meta})


def load_ui_model(path):
    store, strings = load_store(path)
    kind = strings["model.kind"][0]
    meta = dict(line.split("=", 1) for line in strings["model.config"])
    if kind == "fism":
        return FismModel(store, float(meta["alpha"]), int(meta["window"]) or None)
    cfg = SasrecConfig()
    hints = typing.get_type_hints(SasrecConfig)
    for k, v in meta.items():
        setattr(cfg, k, _coerce(v, hints[k]))
    return SasrecModel(store, cfg)


def _pack_lists(lists, width: int | None = None) -> np.ndarray:
    w = width if width is not None else max((len(x) for x in lists), default=0)
    out = np.full((len(lists), max(w, 1)), -1.0, dtype=np.float32)
    for r, x in enumerate(lists):
        out[r, :len(x)] = x
    return out


def _unpack_lists(arr: np.ndarray) -> list[np.ndarray]:
    return [row[row >= 0].astype(np.int64) for row in arr]


def save_index(path, index: UserIndex, histories=None, user_ids=None) -> None:
    tensors = {
        "index.reps": index.reps,
        "index.valid": index.valid.astype(np.float32),
        "index.windows": _pack_lists(index.windows, index.window),
        "index.window": np.array([index.window], dtype=np.float32),
        "index.built": np.array(divmod(int(index.build_timestamp), 65536), dtype=np.float32),
    }
    strings = {}
    if histories is not None:
        flat = np.concatenate([np.asarray(h, dtype=np.int64) for h in histories]) if histories else np.zeros(0)
        tensors["live.lengths"] = np.array([len(h) for h in histories], dtype=np.float32)
        tensors["live.items"] = flat.astype(np.float32)
    if user_ids is not None:
        strings["live.users"] = list(user_ids)
    save_container(path, tensors, strings=strings)


def load_index(path):
    """Returns (index, histories or None, user_ids or None)."""
    tensors, strings, _ = load_container(path)
    window = int(tensors["index.window"][0])
    built = tensors["index.built"]
    index = UserIndex(tensors["index.reps"].copy(), tensors["index.valid"] > 0,
                      _unpack_lists(tensors["index.windows"]), window,
                      float(built[0]) * 65536 + float(built[1]))
    histories = None
    if "live.lengths" in tensors:
        bounds = np.cumsum(tensors["live.lengths"].astype(np.int64))[:-1]
        histories = [h.astype(np.int64) for h in np.split(tensors["live.items"], bounds)]
    return index, histories, strings.get("live.users")


# --- training --------------------------------------------------------------------


def make_ui_model(cfg: EngineConfig, n_items: int, rng):
    if cfg.model == "fism":
        return FismModel.init(n_items, cfg.fism, rng)
    if cfg.model == "sasrec":
        return SasrecModel.init(n_items, cfg.sasrec, rng)
    raise ConfigError(f"unknown model kind {cfg.model!r}")


@dataclass
class FitLog:
    epochs_run: int = 0
    best_epoch: int = 0
    best_hr: float = -1.0
    losses: list[float] = field(default_factory=list)
    val_hr: list[tuple[int, float]] = field(default_factory=list)


def fit_ui(model, corpus: Corpus, cfg: EngineConfig, rng, epochs: int | None = None,
           early_stop: bool = True) -> FitLog:
    """Train for up to ``epochs`` with validation HR@50 early stopping; keeps the best weights."""
    tc = cfg.train
    epochs = tc.epochs if epochs is None else epochs
    if model.kind == "fism":
        steps = fism_epoch_steps(corpus)
        adam = AdamConfig(tc.lr, tc.beta1, tc.beta2, tc.eps, cfg.fism.l2)
    else:
        steps = sasrec_epoch_steps(corpus, model.cfg.batch_size)
        adam = AdamConfig(tc.lr, tc.beta1, tc.beta2, tc.eps, model.cfg.l2)
    decay = DecaySchedule(epochs * steps if tc.linear_decay else None)
    log = FitLog()
    can_eval = early_stop and corpus.valid is not None and (corpus.valid >= 0).any()
    eval_users = None
    if can_eval:
        eval_users = corpus.evaluable_users("valid")
        if tc.eval_users and tc.eval_users < eval_users.size:
            eval_users = np.sort(seeded_rng(cfg.seed + 7).choice(eval_users, tc.eval_users, replace=False))
    best_store, bad = None, 0
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        if model.kind == "fism":
            loss = fism_train_epoch(model, corpus, cfg.fism.neg_per_pos, rng, adam, decay)
        else:
            loss = sasrec_train_epoch(model, corpus, rng, adam, decay)
        log.losses.append(loss)
        log.epochs_run = epoch
        _log.info("epoch %d loss %.4f (%.1fs)", epoch, loss, time.perf_counter() - t0)
        if can_eval and (epoch % tc.eval_every == 0 or epoch == epochs):
            hr = evaluate(ui_scorer(model), corpus, eval_users, ks=(50,), target="valid").hr[50]
            log.val_hr.append((epoch, hr))
            _log.info("epoch %d validation HR@50 %.4f", epoch, hr)
            if hr > log.best_hr:
                log.best_hr, log.best_epoch, best_store, bad = hr, epoch, model.store.copy(), 0
            else:
                bad += 1
                if bad >= tc.patience:
                    _log.info("early stop at epoch %d (best %d)", epoch, log.best_epoch)
                    break
    if best_store is not None:
        model.store = best_store
    else:
        log.best_epoch = log.epochs_run
    return log


def train_ui(cfg: EngineConfig, corpus: Corpus):
    """Tune on the train prefix, then continue on train+validation.

    The final model starts from the tuned weights (fresh optimizer state), so
    its embedding space stays the one the fusion network is trained against.
    Returns (tuned model, final model, log); the final model is the tuned one
    when ``train.final_retrain`` is off.
    """
    rng = seeded_rng(cfg.seed)
    model = make_ui_model(cfg, corpus.n_items, rng)
    log = fit_ui(model, corpus, cfg, rng)
    if not cfg.train.final_retrain or cfg.train.final_epochs < 1:
        return model, model, log
    final = make_ui_model(cfg, corpus.n_items, seeded_rng(cfg.seed + 1))
    final.store = _warm_copy(model.store)
    fit_ui(final, with_split(corpus, final=True), cfg, seeded_rng(cfg.seed + 2),
           epochs=cfg.train.final_epochs, early_stop=False)
    return model, final, log


def _warm_copy(store: ParameterStore) -> ParameterStore:
    out = store.copy()
    out.step = 0
    for name in out.names():
        out.adam_m[name][...] = 0
        out.adam_v[name][...] = 0
    return out


def train_fusion_stage(cfg: EngineConfig, model, corpus: Corpus) -> tuple[FusionNet, FusionTrainLog, UserIndex]:
    rng = seeded_rng(cfg.seed + 3)
    index = build_user_index(model, corpus, cfg.uu.window)
    net = FusionNet.init(model.dim, cfg.fusion.hidden, rng)
    net, log = fusion_train(net, corpus, model, index, cfg.fusion.N, rng, cfg.fusion, cfg.uu.beta,
                            refit=True)
    return net, log, index


def evaluate_mode(mode: str, cfg: EngineConfig, model, corpus: Corpus, net: FusionNet | None = None,
                  users=None, index: UserIndex | None = None) -> EvalReport:
    """Test-set metrics for one scorer; the corpus split decides which history is visible."""
    if mode == "ui":
        return evaluate(ui_scorer(model), corpus, users)
    index = index or build_user_index(model, corpus, cfg.uu.window)
    if mode == "uu":
        return evaluate(uu_scorer(index, corpus.n_items, cfg.uu.beta), corpus, users)
    if mode == "sccf":
        if net is None:
            raise ConfigError("sccf evaluation needs a fusion checkpoint")
        return evaluate(sccf_scorer(net, model, index, corpus, cfg.fusion.N, cfg.uu.beta), corpus, users)
    raise ConfigError(f"unknown eval mode {mode!r}")


def run_pipeline(cfg: EngineConfig, corpus: Corpus, modes=("ui", "uu", "sccf"), users=None) -> dict:
    """Train UI and fusion on the tuning split, evaluate on the final split."""
    _log.info("resolved config:\n%s", "\n".join(cfg.resolved()))
    tuned, final_model, fit_log = train_ui(cfg, corpus)
    net, fusion_log, _ = train_fusion_stage(cfg, tuned, corpus)
    final_corpus = with_split(corpus, final=True)
    index = build_user_index(final_model, final_corpus, cfg.uu.window)
    reports = {m: evaluate_mode(m, cfg, final_model, final_corpus, net, users, index) for m in modes}
    return {"reports": reports, "model": final_model, "tuned": tuned, "net": net,
            "fit_log": fit_log, "fusion_log": fusion_log}


# --- serving ---------------------------------------------------------------------


class ServeSession:
    """Line-protocol state machine over frozen checkpoints and a live user index.

    ``EVENT <user> <item> <ts>`` appends to the user's history and refreshes the
    index row; ``RECO <user> <n>`` runs the full candidate path; ``FLUSH``
    persists the live index. Model parameters never change.
    """

    def __init__(self, model, net: FusionNet, corpus: Corpus, cfg: EngineConfig,
                 flush_path=None, index: UserIndex | None = None, histories=None, user_ids=None):
        self.model = model
        self.net = net
        self.corpus = corpus
        self.cfg = cfg
        self.flush_path = flush_path
        if histories is None:
            histories = [np.asarray(corpus.history(u), dtype=np.int64) for u in range(corpus.n_users)]
        self.histories = [np.asarray(h, dtype=np.int64) for h in histories]
        self.user_ids = list(user_ids) if user_ids is not None else list(corpus.user_ids)
        self.user_index = {u: i for i, u in enumerate(self.user_ids)}
        self.index = index if index is not None else build_user_index(model, corpus, cfg.uu.window, self.histories)
        self.lock = threading.Lock()

    def handle(self, line: str) -> str | None:
        parts = line.split()
        if not parts:
            return None
        cmd = parts[0].upper()
        with self.lock:
            try:
                if cmd == "EVENT" and len(parts) == 4:
                    int(parts[3])
                    return self._event(parts[1], parts[2])
                if cmd == "RECO" and len(parts) == 3:
                    n = int(parts[2])
                    if n <= 0:
                        return "ERR parse"
                    return self._reco(parts[1], n)
                if cmd == "FLUSH" and len(parts) == 1:
                    return self._flush()
            except ValueError:
                return "ERR parse"
        return "ERR parse"

    def _event(self, user: str, item: str) -> str:
        i = self.corpus.item_index.get(item)
        if i is None:
            return "ERR unknown-item"
        u = self.user_index.get(user)
        if u is None:
            u = self.index.add_user()
            self.user_ids.append(user)
            self.user_index[user] = u
            self.histories.append(np.zeros(0, dtype=np.int64))
        h = self.histories[u]
        h = np.append(h[h != i], i)
        self.histories[u] = h
        t0 = time.perf_counter()
        rep = self.model.user_repr(h)
        self.index.set_user(u, rep, h)
        t1 = time.perf_counter()
        top_beta_neighbors(self.index, u, self.cfg.uu.beta)
        t2 = time.perf_counter()
        return f"OK {int(1e6 * (t1 - t0))} {int(1e6 * (t2 - t1))}"

    def recommend(self, u: int, n: int):
        N = max(self.cfg.fusion.N, n)
        return sccf_candidates(self.net, self.model, self.index, self.corpus, u, N, self.cfg.uu.beta,
                               history=self.histories[u])

    def _reco(self, user: str, n: int) -> str:
        u = self.user_index.get(user)
        if u is None or len(self.histories[u]) == 0:
            return "ERR cold-user"
        lst = self.recommend(u, n)
        body = " ".join(f"{self.corpus.item_ids[i]}:{s:.6f}" for i, s in list(lst)[:n])
        return f"ITEMS {body}".rstrip()

    def _flush(self) -> str:
        if not self.flush_path:
            return "ERR no-flush-path"
        save_index(self.flush_path, self.index, self.histories, self.user_ids)
        return "OK flushed"


def serve_stream(session: ServeSession, lines, write) -> None:
    for line in lines:
        reply = session.handle(line)
        if reply is not None:
            write(reply + "\n")


def make_tcp_server(session: ServeSession, host: str, port: int) -> socketserver.ThreadingTCPServer:
    """Threaded TCP server speaking the same line grammar; port 0 picks a free port."""
    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            for raw in self.rfile:
                reply = session.handle(raw.decode("utf-8", "replace"))
                if reply is not None:
                    self.wfile.write((reply + "\n").encode("utf-8"))
                    self.wfile.flush()

    class Server(socketserver.ThreadingTCPServer):
        allow_reuse_address = True
        daemon_threads = True

    return Server((host, port), Handler)


def serve_tcp(session: ServeSession, host: str, port: int) -> None:
    with make_tcp_server(session, host, port) as srv:
        _log.info("serving on %s:%d", host, srv.server_address[1])
        srv.serve_forever()

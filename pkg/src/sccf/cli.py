"""Command-line entry points: ``sccf <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import re
import sys
from pathlib import Path

from . import engine
from .corpus import (CorpusEmptyError, CorpusFormatError, CorpusStats, load_corpus, load_dataset,
                     preprocess, save_corpus, with_split)
from .evalharness import (LatencyReport, evaluate, latency_bench, pop_scorer, rows_to_tsv,
                          similarity_distribution, sweep, userknn_scorer)
from .fusion import load_fusion, save_fusion, user_union
from .neighborhood import UserKNNIndex, build_user_index

_log = logging.getLogger("sccf")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="sccf", description="Real-time user-item + user-based candidate generation")
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    p = sub.add_parser("prep", help="preprocess a raw log into a corpus file")
    p.add_argument("--dataset", required=True, help="ml-1m | ml-20m | games | beauty | amazon")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=5)
    _common(p)

    p = sub.add_parser("stats", help="print corpus statistics as TSV")
    p.add_argument("--corpus", required=True)
    p.add_argument("--name", default="corpus")
    _common(p)

    p = sub.add_parser("train-ui", help="train FISM or SASRec")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", choices=["fism", "sasrec"])
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("build-index", help="infer and normalize every user representation")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--final", action="store_true", help="use train+validation histories")
    _common(p)

    p = sub.add_parser("train-fusion", help="train the integrating network on validation labels")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("eval", help="leave-one-out HR/NDCG on the test items")
    p.add_argument("--model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--mode", required=True, choices=["ui", "uu", "sccf", "pop", "userknn"])
    p.add_argument("--fusion")
    p.add_argument("--assert", dest="asserts", action="append", default=[], metavar="METRIC@K>=VALUE")
    _common(p)

    p = sub.add_parser("bench", help="per-event latency of SCCF vs UserKNN")
    p.add_argument("--model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--method", choices=["sccf", "userknn", "both"], default="both")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--warmup", type=int, default=20)
    _common(p)

    p = sub.add_parser("serve", help="line-protocol serving over stdin/stdout or TCP")
    p.add_argument("--model", required=True)
    p.add_argument("--fusion", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--index", help="resume from a flushed index")
    p.add_argument("--flush-to")
    p.add_argument("--port", type=int)
    p.add_argument("--host", default="127.0.0.1")
    _common(p)

    p = sub.add_parser("sweep", help="grid over config keys, TSV of test metrics per cell")
    p.add_argument("--corpus", required=True)
    p.add_argument("--grid", action="append", required=True, metavar="KEY=V1,V2,...")
    p.add_argument("--modes", default="ui,uu,sccf")
    _common(p)

    p = sub.add_parser("analyze", help="similarity distribution of target vs candidate lists")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    _common(p)
    return ap


def _config(args) -> engine.EngineConfig:
    cfg = engine.load_config(args.config) if args.config else engine.EngineConfig()
    for kv in args.set:
        if "=" not in kv:
            raise engine.ConfigError(f"--set expects KEY=VALUE, got {kv!r}")
        key, val = kv.split("=", 1)
        engine.apply_setting(cfg, key.strip(), val.strip(), "--set")
    return cfg


_ASSERT = re.compile(r"^(hr|ndcg)@(\d+)\s*>=\s*([0-9.eE+-]+)$")


def _check_asserts(report, asserts) -> bool:
    ok = True
    for a in asserts:
        m = _ASSERT.match(a.strip().lower())
        if not m:
            raise engine.ConfigError(f"bad --assert {a!r}; expected e.g. hr@50>=0.33")
        metric, k, thr = m.group(1), int(m.group(2)), float(m.group(3))
        table = report.hr if metric == "hr" else report.ndcg
        if k not in table:
            raise engine.ConfigError(f"--assert on k={k}, which was not evaluated")
        passed = table[k] >= thr
        print(f"# assert {metric}@{k} >= {thr}: {'PASS' if passed else 'FAIL'} ({table[k]:.4f})")
        ok &= passed
    return ok


def _run(args) -> int:
    cfg = _config(args)
    cmd = args.cmd
    if cmd == "prep":
        corpus = preprocess(load_dataset(args.dataset, args.inp), k=args.k)
        save_corpus(args.out, corpus)
        print(CorpusStats.HEADER)
        print(corpus.stats().tsv_row(args.dataset))
        return 0
    if cmd == "stats":
        print(CorpusStats.HEADER)
        print(load_corpus(args.corpus, split=False).stats().tsv_row(args.name))
        return 0

    corpus = load_corpus(args.corpus)
    if cmd == "train-ui":
        if args.model:
            cfg.model = args.model
        _log.info("resolved config:\n%s", "\n".join(cfg.resolved()))
        tuned, final, log = engine.train_ui(cfg, corpus)
        engine.save_ui_model(args.out, final)
        if final is not tuned:
            engine.save_ui_model(Path(args.out).with_suffix(".tuned.ckpt"), tuned)
        print(f"best_epoch\t{log.best_epoch}\nbest_val_hr50\t{log.best_hr:.4f}")
        return 0
    if cmd == "sweep":
        grid = {}
        for g in args.grid:
            key, vals = g.split("=", 1)
            grid[key.strip()] = [v.strip() for v in vals.split(",")]
        modes = tuple(m for m in args.modes.split(",") if m)

        def run(cell):
            c = _config(args)
            for k, v in cell.items():
                engine.apply_setting(c, k, v, "--grid")
            res = engine.run_pipeline(c, corpus, modes)
            out = {}
            for mode, rep in res["reports"].items():
                for k in sorted(rep.hr):
                    out[f"{mode}_hr@{k}"] = rep.hr[k]
                    out[f"{mode}_ndcg@{k}"] = rep.ndcg[k]
            return out
        sys.stdout.write(rows_to_tsv(sweep(grid, run)))
        return 0

    model = engine.load_ui_model(args.model) if getattr(args, "model", None) else None
    if cmd == "build-index":
        c = with_split(corpus, final=args.final)
        index = build_user_index(model, c, cfg.uu.window)
        engine.save_index(args.out, index)
        print(f"users\t{index.n_users}\nvalid\t{int(index.valid.sum())}")
        return 0
    if cmd == "train-fusion":
        net, log, _ = engine.train_fusion_stage(cfg, model, corpus)
        save_fusion(args.out, net)
        print(f"train_users\t{log.n_train}\nholdout_users\t{log.n_holdout}\n"
              f"skipped_users\t{log.n_skipped}\nbest_epoch\t{log.best_epoch}")
        return 0
    if cmd == "eval":
        final = with_split(corpus, final=True)
        if args.mode == "pop":
            report = evaluate(pop_scorer(final.item_counts()), final)
        elif args.mode == "userknn":
            knn = UserKNNIndex([final.history(u) for u in range(final.n_users)], final.n_items)
            report = evaluate(userknn_scorer(knn, cfg.uu.beta), final)
        else:
            if model is None:
                raise engine.ConfigError(f"--mode {args.mode} needs --model")
            net = load_fusion(args.fusion) if args.fusion else None
            report = engine.evaluate_mode(args.mode, cfg, model, final, net)
        sys.stdout.write(report.to_tsv())
        return 0 if _check_asserts(report, args.asserts) else 1
    if cmd == "bench":
        final = with_split(corpus, final=True)
        print(LatencyReport.HEADER)
        if args.method in ("sccf", "both"):
            if model is None:
                raise engine.ConfigError("sccf latency needs --model")
            print(latency_bench("sccf", final, model, cfg.uu.beta, args.trials, args.warmup, cfg.seed,
                                window=cfg.uu.window).tsv_row())
        if args.method in ("userknn", "both"):
            print(latency_bench("userknn", final, None, cfg.uu.beta, args.trials, args.warmup, cfg.seed).tsv_row())
        return 0
    if cmd == "serve":
        final = with_split(corpus, final=True)
        net = load_fusion(args.fusion)
        index = histories = users = None
        if args.index:
            index, histories, users = engine.load_index(args.index)
        session = engine.ServeSession(model, net, final, cfg, args.flush_to, index, histories, users)
        if args.port:
            engine.serve_tcp(session, args.host, args.port)
        else:
            def write(s):
                sys.stdout.write(s)
                sys.stdout.flush()
            engine.serve_stream(session, sys.stdin, write)
        return 0
    if cmd == "analyze":
        index = build_user_index(model, corpus, cfg.uu.window)
        users = corpus.evaluable_users("valid")
        ui_lists, uu_lists, reps = {}, {}, {}
        for u in users.tolist():
            m_u, c_ui, c_uu, _ = user_union(model, index, corpus, corpus.history(u), cfg.fusion.N,
                                            cfg.uu.beta, user=u)
            ui_lists[u], uu_lists[u], reps[u] = c_ui.items, c_uu.items, m_u
        hist = similarity_distribution(model, corpus, {"ui": ui_lists, "uu": uu_lists}, users,
                                       target="valid", reps=reps)
        sys.stdout.write(hist.to_tsv())
        return 0
    raise engine.ConfigError(f"unknown subcommand {cmd}")


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return _run(args)
    except (engine.ConfigError, CorpusFormatError, CorpusEmptyError, FileNotFoundError,
            ValueError, RuntimeError) as e:
        print(f"sccf: error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()

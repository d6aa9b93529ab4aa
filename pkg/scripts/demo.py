"""End-to-end run on a small synthetic corpus: train FISM, train the fusion
network, print test metrics for each channel, then replay a short serving
session.  Takes well under a minute.

    python scripts/demo.py
"""

import logging

from sccf import engine
from sccf.corpus import with_split
from sccf.synthetic import clustered_corpus

CONFIG = """
model = fism
train.epochs = 40
train.lr = 0.01
fism.dim = 32
uu.beta = 30
fusion.N = 30
"""


def main():
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    cfg = engine.parse_config(CONFIG)
    corpus = clustered_corpus(400, 150, seed=1)
    res = engine.run_pipeline(cfg, corpus)
    for mode, rep in res["reports"].items():
        print(f"# {mode}")
        print(rep.to_tsv(), end="")

    session = engine.ServeSession(res["model"], res["net"], with_split(corpus, final=True), cfg)
    for line in ["RECO u0 5", "EVENT u0 i7 1700000000", "RECO u0 5", "EVENT walk-in i3 1700000001",
                 "RECO walk-in 5"]:
        print(f"> {line}\n< {session.handle(line)}")


if __name__ == "__main__":
    main()

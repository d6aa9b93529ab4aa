"""Per-event update cost of SCCF vs UserKNN on synthetic ML-1M-sized data, and
how identify time grows with the item vocabulary.

    python scripts/latency_scaling.py --items 3416,34160,341600
"""

import argparse
import logging

from sccf import experiments
from sccf.evalharness import LatencyReport, identify_scaling, latency_bench
from sccf.numerics import seeded_rng
from sccf.sasrec import SasrecModel
from sccf.synthetic import random_histories


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--users", type=int, default=6040)
    ap.add_argument("--avg-len", type=int, default=160)
    ap.add_argument("--items", default="3416,34160,341600")
    ap.add_argument("--beta", type=int, default=100)
    ap.add_argument("--trials", type=int, default=200)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")

    cfg = experiments.ml1m_config("sasrec")
    # timing does not depend on trained weights, so a fresh model is enough
    make_model = lambda m: SasrecModel.init(m, cfg.sasrec, seeded_rng(0))  # noqa: E731
    sizes = [int(x) for x in args.items.split(",")]

    corpus = random_histories(args.users, sizes[0], args.avg_len)
    print(LatencyReport.HEADER)
    print(latency_bench("sccf", corpus, make_model(sizes[0]), args.beta, args.trials).tsv_row())
    print(latency_bench("userknn", corpus, None, args.beta, args.trials).tsv_row())
    print()
    rep = identify_scaling(make_model, sizes, args.users, args.avg_len, args.beta, trials=args.trials // 2)
    print(rep.to_tsv(), end="")


if __name__ == "__main__":
    main()

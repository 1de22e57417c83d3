"""PQ vs UNQ (and the ablations) on a seeded Gaussian-mixture bundle.

Prints a tab-separated recall table in the same layout as ``unq evaluate``:

    python scripts/benchmark_synthetic.py --n-components 16 --epochs 30
"""

import argparse
import time

import numpy as np

from unq.cli import recall_table
from unq.data_io import synth_dataset
from unq.model import UnqModel
from unq.pq import pq_encode, pq_search_batch, pq_train
from unq.search import CodeTable, exact_knn, recall_at_k, search_batch
from unq.training import TrainConfig, fit

ABLATIONS = {
    "UNQ": {},
    "UNQ no-rerank": {},
    "UNQ no-triplet": {"no_triplet": True},
    "UNQ triplet-only": {"triplet_only": True},
    "UNQ no-regularizer": {"no_regularizer": True},
    "UNQ soft-gumbel": {"soft_gumbel": True},
}


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n-components", type=int, default=16)
    p.add_argument("--D", type=int, default=32)
    p.add_argument("--n-train", type=int, default=5000)
    p.add_argument("--n-base", type=int, default=20000)
    p.add_argument("--n-query", type=int, default=500)
    p.add_argument("--M", type=int, default=4)
    p.add_argument("--K", type=int, default=256)
    p.add_argument("--d-code", type=int, default=64)
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--peak-lr", type=float, default=3e-3)
    p.add_argument("--L", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--only", nargs="*", default=None, help="subset of rows to run")
    return p.parse_args()


def main():
    args = parse_args()
    b = synth_dataset(args.n_train, args.n_base, args.n_query, args.D, args.n_components, seed=args.seed)
    gt = exact_knn(b.base, b.queries, 100).ids
    ks = (1, 10, 100)
    rows = []

    t0 = time.perf_counter()
    books = pq_train(b.train, args.M, args.K, seed=args.seed)
    ids, _ = pq_search_batch(books, b.queries, CodeTable(pq_encode(books, b.base), K=args.K), 100)
    rows.append(("PQ", args.M, [recall_at_k(ids, gt, k) for k in ks]))
    print(f"# PQ done in {time.perf_counter() - t0:.0f}s", flush=True)

    trained = {}
    for label, flags in ABLATIONS.items():
        if args.only is not None and label not in args.only:
            continue
        key = tuple(sorted(flags.items()))
        if key not in trained:
            t0 = time.perf_counter()
            model = UnqModel(args.D, args.M, args.K, args.d_code, (args.hidden,) * 2, (args.hidden,) * 2,
                             seed=args.seed)
            cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, peak_lr=args.peak_lr, **flags)
            fit(model, b.train, cfg, rng=args.seed + 1)
            table = CodeTable(model.hard_encode(b.base), K=args.K)
            used = [len(np.unique(table.codes[:, m])) for m in range(args.M)]
            print(f"# trained {dict(flags) or 'full'} in {time.perf_counter() - t0:.0f}s; codes used {used}",
                  flush=True)
            trained[key] = (model, table)
        model, table = trained[key]
        ids, _ = search_batch(model, b.queries, table, L=args.L, k=100, no_rerank=label == "UNQ no-rerank")
        rows.append((label, args.M, [recall_at_k(ids, gt, k) for k in ks]))

    print(recall_table(rows, ks))


if __name__ == "__main__":
    main()

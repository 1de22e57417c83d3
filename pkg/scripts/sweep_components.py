"""Recall of PQ and UNQ as the number of mixture components varies.

Few components leave most of the neighbour structure in isotropic
within-cluster noise; many components put it in cluster identity.
"""

import argparse

from unq.data_io import synth_dataset
from unq.model import UnqModel
from unq.pq import pq_encode, pq_search_batch, pq_train
from unq.search import CodeTable, exact_knn, recall_at_k, search_batch
from unq.training import TrainConfig, fit


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--components", type=int, nargs="+", default=[16, 64, 256, 1024])
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--epochs", type=int, default=30)
    args = p.parse_args()
    print("components\tseed\tmethod\tR@1\tR@10\tR@100", flush=True)
    for n in args.components:
        for seed in args.seeds:
            b = synth_dataset(5000, 20000, 500, 32, n, seed=seed)
            gt = exact_knn(b.base, b.queries, 100).ids
            books = pq_train(b.train, 4, 256, seed=seed)
            pq_ids, _ = pq_search_batch(books, b.queries, CodeTable(pq_encode(books, b.base)), 100)
            model = UnqModel(32, 4, 256, 64, (256, 256), (256, 256), seed=seed)
            fit(model, b.train, TrainConfig(epochs=args.epochs, batch_size=256, peak_lr=3e-3), rng=seed + 1)
            unq_ids, _ = search_batch(model, b.queries, CodeTable(model.hard_encode(b.base)), L=500, k=100)
            for name, ids in (("PQ", pq_ids), ("UNQ", unq_ids)):
                r = [recall_at_k(ids, gt, k) for k in (1, 10, 100)]
                print(f"{n}\t{seed}\t{name}\t" + "\t".join(f"{v:.4f}" for v in r), flush=True)


if __name__ == "__main__":
    main()

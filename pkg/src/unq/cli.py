"""Command-line entry point: ``unq <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data_io
from .model import CheckpointError, InvalidCodeError, UnqModel, load_checkpoint, save_checkpoint
from .nn import ShapeError
from .pq import load_pq, pq_encode, pq_search_batch, pq_train, save_pq
from .search import CodeTable, DEFAULT_RERANK_L, exact_knn, read_results, recall_at_k, search_batch, write_results
from .training import NumericalAbort, TrainConfig, fit

log = logging.getLogger("unq")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()] if text else []


def read_vectors(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".bvecs":
        return data_io.read_bvecs(path)
    if path.suffix == ".ivecs":
        return data_io.read_ivecs(path).astype(np.float32)
    return data_io.read_fvecs(path)


def _require_inputs(*paths) -> None:
    for p in paths:
        if not Path(p).is_file():
            raise FileNotFoundError(f"input file not found: {p}")


def _require_outputs(*paths) -> None:
    for p in paths:
        parent = Path(p).resolve().parent
        if not parent.is_dir():
            raise FileNotFoundError(f"output directory does not exist: {parent}")


def _default_workers() -> int:
    return os.cpu_count() or 1


# -- subcommands ----------------------------------------------------------------

def cmd_groundtruth(args) -> int:
    _require_inputs(args.base, args.queries)
    _require_outputs(args.out)
    base, queries = read_vectors(args.base), read_vectors(args.queries)
    if base.shape[1] != queries.shape[1]:
        raise ShapeError(f"{args.base} has D={base.shape[1]} but {args.queries} has D={queries.shape[1]}")
    gt = exact_knn(base, queries, args.k, workers=args.workers)
    data_io.write_ivecs(args.out, gt.ids.astype(np.int32))
    print(f"wrote {gt.ids.shape[0]} x {args.k} neighbour ids to {args.out}")
    return EXIT_OK


TRAIN_FIELDS = ("alpha", "beta_start", "beta_end", "delta", "batch_size", "epochs", "peak_lr", "min_lr",
                "beta1", "beta2", "nu1", "nu2", "eps", "n_neighbors", "no_triplet", "triplet_only",
                "no_regularizer", "soft_gumbel")


def train_config_from_args(args) -> TrainConfig:
    try:
        return TrainConfig(**{f: getattr(args, f) for f in TRAIN_FIELDS})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    _require_inputs(args.train)
    log_path = args.log or str(args.out) + ".log"
    _require_outputs(args.out, log_path)
    config = train_config_from_args(args)
    x = read_vectors(args.train)
    model = UnqModel(x.shape[1], args.M, args.K, args.d_code, _int_list(args.enc_hidden),
                     _int_list(args.dec_hidden), seed=args.seed)
    rng = np.random.default_rng(args.seed + 1)
    with open(log_path, "w", encoding="ascii", newline="\n") as logf:
        def on_epoch(rec):
            logf.write(rec.line() + "\n")
            logf.flush()
        fit(model, x, config, rng, on_epoch=on_epoch, workers=args.workers)
    save_checkpoint(model, args.out)
    print(f"saved model to {args.out}; training log in {log_path}")
    return EXIT_OK


def cmd_encode(args) -> int:
    _require_inputs(args.model, args.base)
    _require_outputs(args.out)
    model = load_checkpoint(args.model)
    base = read_vectors(args.base)
    if base.shape[0] and base.shape[1] != model.D:
        raise ShapeError(f"{args.base} has D={base.shape[1]}, model expects D={model.D}")
    codes = model.hard_encode(base) if base.shape[0] else np.empty((0, model.M), dtype=np.int64)
    data_io.write_codes(args.out, CodeTable(codes, K=model.K))
    bits = int(np.ceil(np.log2(model.K))) * model.M
    print(f"encoded {codes.shape[0]} vectors: {bits / 8:g} bytes per vector (M={model.M}, K={model.K})")
    return EXIT_OK


def _check_search_args(args) -> None:
    if args.L < args.k:
        raise UsageError(f"--L ({args.L}) must be at least --k ({args.k})")


def cmd_search(args) -> int:
    _check_search_args(args)
    _require_inputs(args.model, args.codes, args.queries)
    _require_outputs(args.out)
    model = load_checkpoint(args.model)
    table = data_io.read_codes(args.codes)
    queries = read_vectors(args.queries)
    if queries.shape[1] != model.D:
        raise ShapeError(f"{args.queries} has D={queries.shape[1]}, model expects D={model.D}")
    if table.M != model.M:
        raise ShapeError(f"{args.codes} has M={table.M}, model expects M={model.M}")
    ids, scores = search_batch(model, queries, table, L=min(args.L, table.N), k=args.k,
                               no_rerank=args.no_rerank, use_temperature=not args.no_temperature,
                               workers=args.workers)
    write_results(args.out, ids, scores)
    print(f"searched {queries.shape[0]} queries ({'d2 scan only' if args.no_rerank else f'L={args.L} rerank'})")
    return EXIT_OK


def recall_table(rows, k_list) -> str:
    header = ["method", "bytes"] + [f"R@{k}" for k in k_list]
    lines = ["\t".join(header)]
    for method, nbytes, recalls in rows:
        lines.append("\t".join([method, str(nbytes)] + [f"{r:.4f}" for r in recalls]))
    return "\n".join(lines)


def cmd_evaluate(args) -> int:
    _require_inputs(args.gt, *args.results)
    gt = data_io.read_ivecs(args.gt)
    k_list = _int_list(args.k)
    labels = args.label or [Path(p).stem for p in args.results]
    nbytes = args.bytes or ["-"] * len(args.results)
    if len(labels) != len(args.results) or len(nbytes) != len(args.results):
        raise UsageError("give one --label/--bytes per --results file (or none)")
    rows = []
    for path, label, nb in zip(args.results, labels, nbytes):
        ids, _ = read_results(path)
        if ids.shape[0] != gt.shape[0]:
            raise ShapeError(f"{path} has {ids.shape[0]} queries but {args.gt} has {gt.shape[0]}")
        rows.append((label, nb, [recall_at_k(ids, gt, k) for k in k_list]))
    print(recall_table(rows, k_list))
    return EXIT_OK


def cmd_pq_train(args) -> int:
    _require_inputs(args.train)
    _require_outputs(args.out)
    x = read_vectors(args.train)
    books = pq_train(x, args.M, args.K, seed=args.seed, max_iters=args.iters)
    save_pq(books, args.out)
    print(f"saved PQ codebooks (D={books.D}, M={books.M}, K={books.K}) to {args.out}")
    return EXIT_OK


def cmd_pq_encode(args) -> int:
    _require_inputs(args.codebooks, args.base)
    _require_outputs(args.out)
    books = load_pq(args.codebooks)
    base = read_vectors(args.base)
    codes = pq_encode(books, base) if base.shape[0] else np.empty((0, books.M), dtype=np.int64)
    data_io.write_codes(args.out, CodeTable(codes, K=books.K))
    print(f"encoded {codes.shape[0]} vectors: {books.M} bytes per vector")
    return EXIT_OK


def cmd_pq_search(args) -> int:
    _require_inputs(args.codebooks, args.codes, args.queries)
    _require_outputs(args.out)
    books = load_pq(args.codebooks)
    table = data_io.read_codes(args.codes)
    queries = read_vectors(args.queries)
    ids, scores = pq_search_batch(books, queries, table, args.k)
    write_results(args.out, ids, scores)
    print(f"searched {queries.shape[0]} queries with PQ/ADC")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="unq", description="Neural multi-codebook quantization for compressed-domain search.")
    p.add_argument("--config", help="JSON file whose keys override the parsed flags")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def workers(sp):
        sp.add_argument("--workers", type=int, default=_default_workers())

    sp = sub.add_parser("groundtruth", help="exact k-NN ids (ivecs)")
    sp.add_argument("--base", required=True)
    sp.add_argument("--queries", required=True)
    sp.add_argument("--k", type=int, default=100)
    sp.add_argument("--out", required=True)
    workers(sp)
    sp.set_defaults(func=cmd_groundtruth)

    d = TrainConfig()
    sp = sub.add_parser("train", help="train a UNQ model")
    sp.add_argument("--train", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--log")
    sp.add_argument("--M", type=int, default=8)
    sp.add_argument("--K", type=int, default=256)
    sp.add_argument("--d-code", dest="d_code", type=int, default=256)
    sp.add_argument("--enc-hidden", default="1024,1024")
    sp.add_argument("--dec-hidden", default="1024,1024")
    sp.add_argument("--alpha", type=float, default=d.alpha)
    sp.add_argument("--beta-start", type=float, default=d.beta_start)
    sp.add_argument("--beta-end", type=float, default=d.beta_end)
    sp.add_argument("--delta", type=float, default=d.delta)
    sp.add_argument("--batch-size", type=int, default=d.batch_size)
    sp.add_argument("--epochs", type=int, default=d.epochs)
    sp.add_argument("--peak-lr", type=float, default=d.peak_lr)
    sp.add_argument("--min-lr", type=float, default=None)
    sp.add_argument("--beta1", type=float, default=d.beta1)
    sp.add_argument("--beta2", type=float, default=d.beta2)
    sp.add_argument("--nu1", type=float, default=d.nu1)
    sp.add_argument("--nu2", type=float, default=d.nu2)
    sp.add_argument("--eps", type=float, default=d.eps)
    sp.add_argument("--n-neighbors", type=int, default=d.n_neighbors)
    sp.add_argument("--no-triplet", action="store_true")
    sp.add_argument("--triplet-only", action="store_true")
    sp.add_argument("--no-regularizer", action="store_true")
    sp.add_argument("--soft-gumbel", action="store_true")
    sp.add_argument("--seed", type=int, default=0)
    workers(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("encode", help="encode a base set into a UNQC code file")
    sp.add_argument("--model", required=True)
    sp.add_argument("--base", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("search", help="two-stage search over a code file")
    sp.add_argument("--model", required=True)
    sp.add_argument("--codes", required=True)
    sp.add_argument("--queries", required=True)
    sp.add_argument("--L", type=int, default=DEFAULT_RERANK_L)
    sp.add_argument("--k", type=int, default=100)
    sp.add_argument("--no-rerank", action="store_true")
    sp.add_argument("--no-temperature", action="store_true",
                    help="scan with raw dot products instead of dividing by the temperatures")
    sp.add_argument("--out", required=True)
    workers(sp)
    sp.set_defaults(func=cmd_search)

    sp = sub.add_parser("evaluate", help="Recall@k report")
    sp.add_argument("--results", required=True, action="append")
    sp.add_argument("--gt", required=True)
    sp.add_argument("--k", default="1,10,100")
    sp.add_argument("--label", action="append")
    sp.add_argument("--bytes", action="append")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("pq-train", help="train PQ codebooks")
    sp.add_argument("--train", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--M", type=int, default=8)
    sp.add_argument("--K", type=int, default=256)
    sp.add_argument("--iters", type=int, default=25)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_pq_train)

    sp = sub.add_parser("pq-encode", help="encode a base set with PQ codebooks")
    sp.add_argument("--codebooks", required=True)
    sp.add_argument("--base", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_pq_encode)

    sp = sub.add_parser("pq-search", help="ADC search over a PQ code file")
    sp.add_argument("--codebooks", required=True)
    sp.add_argument("--codes", required=True)
    sp.add_argument("--queries", required=True)
    sp.add_argument("--k", type=int, default=100)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_pq_search)
    return p


def parse_args(argv=None) -> argparse.Namespace:
    args = build_parser().parse_args(argv)
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        for key, value in overrides.items():
            key = key.replace("-", "_")
            if not hasattr(args, key):
                raise UsageError(f"unknown config key {key!r} for '{args.command}'")
            setattr(args, key, value)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, ShapeError, CheckpointError, InvalidCodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""Compressed-domain search: LUT scan, decoder rerank, brute-force oracle, recall."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import UnqModel
from .nn import ShapeError

DEFAULT_RERANK_L = 500
BILLION_SCALE_RERANK_L = 1000


class EmptyTableError(ValueError):
    pass


@dataclass
class CodeTable:
    codes: np.ndarray  # (N, M) uint8
    K: int = 256

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if codes.ndim != 2:
            raise ShapeError(f"code table must be 2-D, got {codes.shape}")
        if self.K > 256:
            raise ValueError("code tables hold 8-bit indices, K must be <= 256")
        if codes.size and (codes.min() < 0 or codes.max() >= self.K):
            raise ValueError(f"codes must lie in [0, {self.K})")
        self.codes = codes.astype(np.uint8)

    @property
    def N(self) -> int:
        return self.codes.shape[0]

    @property
    def M(self) -> int:
        return self.codes.shape[1]


@dataclass
class GroundTruth:
    ids: np.ndarray  # (Nq, k), ascending true distance
    distances: np.ndarray | None = None


@dataclass
class SearchResult:
    ids: np.ndarray
    scores: np.ndarray  # d1 after rerank, d2 without
    scan_ids: np.ndarray = field(repr=False, default=None)
    scan_scores: np.ndarray = field(repr=False, default=None)
    reranked: bool = True
    truncated: bool = False  # fewer candidates than requested k


def smallest_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest scores, ascending, ties to the lower index."""
    n = scores.shape[0]
    k = min(k, n)
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    if k < n:
        threshold = np.partition(scores, k - 1)[k - 1]
        cand = np.flatnonzero(scores <= threshold)
    else:
        cand = np.arange(n)
    order = np.argsort(scores[cand], kind="stable")
    return cand[order[:k]]


# -- learned-space scan -------------------------------------------------------

def build_luts(model: UnqModel, queries, use_temperature: bool = True) -> np.ndarray:
    """One encoder pass, then all ``<net(q)_m, c_mk> / tau_m``: ``(Nq, M, K)``."""
    with model.inference():
        heads = model.encode_heads(queries)
        return model.codeword_logits(heads, use_temperature=use_temperature).astype(np.float32)


def build_lut(model: UnqModel, q, use_temperature: bool = True) -> np.ndarray:
    q = np.asarray(q)
    if q.ndim != 1:
        raise ShapeError(f"build_lut takes a single query vector, got {q.shape}")
    return build_luts(model, q[None, :], use_temperature)[0]


def d2_scores(lut: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """``-sum_m lut[m, codes[:, m]]`` accumulated in float32, codebook by codebook."""
    codes = np.asarray(codes)
    scores = np.zeros(codes.shape[0], dtype=np.float32)
    for m in range(lut.shape[0]):
        scores -= lut[m, codes[:, m]]
    return scores


def scan(lut: np.ndarray, table: CodeTable, L: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-L database ids under the LUT distance, with their scores."""
    if table.N == 0:
        raise EmptyTableError("cannot scan an empty code table")
    if lut.ndim != 2 or lut.shape[0] != table.M:
        raise ShapeError(f"lut shape {lut.shape} does not match table with M={table.M}")
    scores = d2_scores(lut, table.codes)
    ids = smallest_k(scores, L)
    return ids, scores[ids]


# -- reconstruction-space rerank ----------------------------------------------

def squared_distances(q: np.ndarray, points: np.ndarray) -> np.ndarray:
    diff = points - q[None, :]
    return np.einsum("ij,ij->i", diff, diff)


def rerank(model: UnqModel, q, candidate_ids, table: CodeTable, k: int):
    """Decode the candidates and keep the k closest to ``q`` in input space.

    Returns ``(ids, d1, truncated)``; ``truncated`` is set when fewer than k
    candidates were supplied.
    """
    cand = np.asarray(candidate_ids, dtype=np.int64)
    if cand.size and (cand.min() < 0 or cand.max() >= table.N):
        raise IndexError("candidate ids outside the code table")
    # decode in id order so the result never depends on candidate order
    cand = np.sort(cand)
    q = np.asarray(q, dtype=model.dtype)
    recon = model.decode(table.codes[cand])
    d1 = squared_distances(q, recon).astype(np.float32)
    keep = smallest_k(d1, k)
    return cand[keep], d1[keep], k > cand.size


def search(model: UnqModel, q, table: CodeTable, L: int = DEFAULT_RERANK_L, k: int = 100,
           no_rerank: bool = False, use_temperature: bool = True,
           lut: np.ndarray | None = None) -> SearchResult:
    """Two-stage search for one query: LUT scan for L candidates, then d1 rerank."""
    if k > L:
        raise ValueError(f"k={k} must not exceed L={L}")
    if lut is None:
        lut = build_lut(model, q, use_temperature)
    scan_ids, scan_scores = scan(lut, table, L)
    if no_rerank:
        return SearchResult(scan_ids[:k], scan_scores[:k], scan_ids, scan_scores, reranked=False,
                            truncated=k > scan_ids.size)
    ids, d1, truncated = rerank(model, q, scan_ids, table, k)
    return SearchResult(ids, d1, scan_ids, scan_scores, reranked=True, truncated=truncated)


def exhaustive_search(model: UnqModel, q, table: CodeTable, k: int) -> tuple[np.ndarray, np.ndarray]:
    """d1 over the whole database (the exhaustive-rerank variant)."""
    recon = model.decode(table.codes)
    d1 = squared_distances(np.asarray(q, dtype=model.dtype), recon).astype(np.float32)
    ids = smallest_k(d1, k)
    return ids, d1[ids]


def _split(n: int, parts: int):
    bounds = np.linspace(0, n, max(1, parts) + 1).astype(int)
    return [(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def search_batch(model: UnqModel, queries, table: CodeTable, L: int = DEFAULT_RERANK_L,
                 k: int = 100, no_rerank: bool = False, use_temperature: bool = True,
                 workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Search every query; returns ``(ids, scores)`` each ``(Nq, k)``.

    Queries are independent, so splitting them across threads changes nothing
    in the output.
    """
    queries = np.asarray(queries, dtype=model.dtype)
    k_eff = min(k, table.N)
    ids = np.zeros((queries.shape[0], k_eff), dtype=np.int64)
    scores = np.zeros((queries.shape[0], k_eff), dtype=np.float32)
    if queries.shape[0] == 0:
        return ids, scores
    luts = build_luts(model, queries, use_temperature)

    def run(lo: int, hi: int):
        for i in range(lo, hi):
            res = search(model, queries[i], table, L, k, no_rerank, lut=luts[i])
            ids[i], scores[i] = res.ids, res.scores

    if workers <= 1:
        run(0, queries.shape[0])
    else:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(lambda ab: run(*ab), _split(queries.shape[0], workers)))
    return ids, scores


# -- exact neighbours and recall ------------------------------------------------

def exact_knn(base, queries, k: int, exclude_self: bool = False,
              batch_size: int = 1024, workers: int = 1) -> GroundTruth:
    """Brute-force Euclidean k-NN, ties broken by the lower id.

    Candidates come from the expanded ``|q|^2 - 2 q.b + |b|^2`` form in float64;
    the final ordering is decided on directly computed ``|q - b|^2``.  With
    ``exclude_self`` the query set must be the base set and row i never lists i.
    """
    base = np.asarray(base, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    n = base.shape[0]
    if exclude_self and queries.shape[0] != n:
        raise ValueError("exclude_self needs queries == base")
    avail = n - 1 if exclude_self else n
    if k > avail:
        raise ValueError(f"k={k} exceeds the {avail} available neighbours")
    if queries.ndim != 2 or base.ndim != 2 or queries.shape[1] != base.shape[1]:
        raise ShapeError(f"dimension mismatch: base {base.shape}, queries {queries.shape}")
    ids = np.empty((queries.shape[0], k), dtype=np.int64)
    dists = np.empty((queries.shape[0], k), dtype=np.float64)
    if k == 0:
        return GroundTruth(ids, dists)
    base_sq = np.einsum("ij,ij->i", base, base)
    margin = min(n, k + 1 + max(8, k // 4))

    def run(lo: int, hi: int):
        for s in range(lo, hi, batch_size):
            qb = queries[s:min(s + batch_size, hi)]
            approx = base_sq[None, :] - 2.0 * qb @ base.T + np.einsum("ij,ij->i", qb, qb)[:, None]
            for r in range(qb.shape[0]):
                row = approx[r]
                if exclude_self:
                    row[s + r] = np.inf
                cand = smallest_k(row, margin)
                # widen so no point tied with the boundary candidate is lost
                cand = np.flatnonzero(row <= row[cand[-1]] + 1e-9 * (1.0 + abs(row[cand[-1]])))
                if exclude_self:
                    cand = cand[cand != s + r]
                diff = base[cand] - qb[r]
                exact = np.einsum("ij,ij->i", diff, diff)
                order = np.lexsort((cand, exact))[:k]
                ids[s + r] = cand[order]
                dists[s + r] = exact[order]

    if workers <= 1:
        run(0, queries.shape[0])
    else:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(lambda ab: run(*ab), _split(queries.shape[0], workers)))
    return GroundTruth(ids, dists)


def recall_at_k(result_ids, gt, k: int) -> float:
    """Fraction of queries whose true nearest neighbour is among the first k results."""
    gt_ids = gt.ids if isinstance(gt, GroundTruth) else np.asarray(gt)
    result_ids = np.asarray(result_ids)
    if gt_ids.ndim != 2 or gt_ids.shape[1] < 1:
        raise ValueError("ground truth needs at least one neighbour per query")
    if result_ids.shape[0] != gt_ids.shape[0]:
        raise ValueError(f"{result_ids.shape[0]} result rows vs {gt_ids.shape[0]} ground-truth rows")
    if gt_ids.shape[0] == 0:
        return 0.0
    hits = (result_ids[:, :k] == gt_ids[:, :1]).any(axis=1)
    return float(hits.mean())


# -- results file -----------------------------------------------------------------

def write_results(path, ids: np.ndarray, scores: np.ndarray) -> None:
    """One line per query: query id, then (id, score) pairs, tab-separated."""
    with open(path, "w", encoding="ascii", newline="\n") as f:
        for qi in range(ids.shape[0]):
            fields = [str(qi)]
            for i, s in zip(ids[qi], scores[qi]):
                fields.append(str(int(i)))
                fields.append(repr(float(np.float32(s))))
            f.write("\t".join(fields) + "\n")


def read_results(path) -> tuple[np.ndarray, np.ndarray]:
    rows_ids, rows_scores = [], []
    with open(path, encoding="ascii") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) % 2 != 1:
                raise ValueError(f"{path}:{lineno}: expected query id plus (id, score) pairs")
            if int(parts[0]) != len(rows_ids):
                raise ValueError(f"{path}:{lineno}: query ids must be consecutive from 0")
            rows_ids.append([int(v) for v in parts[1::2]])
            rows_scores.append([float(v) for v in parts[2::2]])
    width = max((len(r) for r in rows_ids), default=0)
    ids = np.full((len(rows_ids), width), -1, dtype=np.int64)
    scores = np.full((len(rows_ids), width), np.nan, dtype=np.float32)
    for i, (r, s) in enumerate(zip(rows_ids, rows_scores)):
        ids[i, :len(r)] = r
        scores[i, :len(s)] = s
    return ids, scores

"""Product quantization baseline with asymmetric distance computation."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import ShapeError
from .search import CodeTable, EmptyTableError, smallest_k

PQ_MAGIC = b"PQC1"


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = (np.einsum("ij,ij->i", x, x)[:, None] - 2.0 * x @ centroids.T
         + np.einsum("ij,ij->i", centroids, centroids)[None, :])
    return np.maximum(d, 0.0)


def _assign(x: np.ndarray, centroids: np.ndarray, chunk: int = 8192):
    labels = np.empty(x.shape[0], dtype=np.int64)
    dist = np.empty(x.shape[0], dtype=np.float64)
    for s in range(0, x.shape[0], chunk):
        d = _sq_dists(x[s:s + chunk], centroids)
        labels[s:s + chunk] = d.argmin(axis=1)
        dist[s:s + chunk] = d[np.arange(d.shape[0]), labels[s:s + chunk]]
    return labels, dist


def kmeans_plusplus(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(x, x[chosen[0]][None, :])[:, 0]
    for _ in range(1, K):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # every point coincides with a centre already; take an unused row
            unused = np.setdiff1d(np.arange(n), chosen)
            idx = int(unused[rng.integers(unused.size)])
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(x, x[idx][None, :])[:, 0])
    return x[chosen].copy()


def kmeans(data, K: int, max_iters: int = 25, seed: int | np.random.Generator = 0,
           return_history: bool = False):
    """Lloyd's algorithm from k-means++ seeding.

    Empty clusters are re-seeded with the point currently farthest from its
    centroid.  Stops after ``max_iters`` or once assignments stop changing.
    Computation is float64; returns float64 centroids ``(K, d)`` (and the
    per-iteration distortion if asked).
    """
    x = np.asarray(data, dtype=np.float64)
    n = x.shape[0]
    if K <= 0:
        raise ValueError("K must be positive")
    if n < K:
        raise ValueError(f"k-means needs at least K={K} points, got {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    centroids = kmeans_plusplus(x, K, rng)
    labels, dist = _assign(x, centroids)
    history = [float(dist.mean())]
    for _ in range(max_iters):
        counts = np.bincount(labels, minlength=K)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        for j in np.flatnonzero(~nonempty):
            far = int(dist.argmax())
            centroids[j] = x[far]
            dist[far] = 0.0
        new_labels, dist = _assign(x, centroids)
        history.append(float(dist.mean()))
        stable = np.array_equal(new_labels, labels) and nonempty.all()
        labels = new_labels
        if stable:
            break
    return (centroids, history) if return_history else centroids


@dataclass
class PqCodebooks:
    centroids: np.ndarray  # (M, K, D / M) float32

    @property
    def M(self) -> int:
        return self.centroids.shape[0]

    @property
    def K(self) -> int:
        return self.centroids.shape[1]

    @property
    def sub_dim(self) -> int:
        return self.centroids.shape[2]

    @property
    def D(self) -> int:
        return self.M * self.sub_dim

    def split(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.D:
            raise ShapeError(f"expected vectors of width {self.D}, got {x.shape}")
        return x.reshape(x.shape[0], self.M, self.sub_dim)


def pq_train(data, M: int, K: int = 256, seed: int = 0, max_iters: int = 25) -> PqCodebooks:
    x = np.asarray(data, dtype=np.float32)
    D = x.shape[1]
    if D % M:
        raise ValueError(f"M={M} does not divide D={D}")
    if K > 256:
        raise ValueError("K must be <= 256 for 8-bit codes")
    ds = D // M
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**63 - 1, size=M)
    cents = np.stack([kmeans(x[:, m * ds:(m + 1) * ds], K, max_iters, int(seeds[m])) for m in range(M)])
    return PqCodebooks(cents.astype(np.float32))


def pq_encode(codebooks: PqCodebooks, x, chunk: int = 1024) -> np.ndarray:
    """Nearest centroid per subspace, ties to the lower index; ``(N, M)``."""
    sub = codebooks.split(x)
    codes = np.empty((sub.shape[0], codebooks.M), dtype=np.int64)
    cents = codebooks.centroids.astype(np.float64)
    for s in range(0, sub.shape[0], chunk):
        block = sub[s:s + chunk].astype(np.float64)
        for m in range(codebooks.M):
            diff = block[:, m, None, :] - cents[m][None]
            codes[s:s + chunk, m] = np.einsum("nkd,nkd->nk", diff, diff).argmin(axis=1)
    return codes


def pq_decode(codebooks: PqCodebooks, codes) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    parts = [codebooks.centroids[m][codes[:, m]] for m in range(codebooks.M)]
    return np.concatenate(parts, axis=1)


def pq_adc_lut(codebooks: PqCodebooks, q) -> np.ndarray:
    """``(M, K)`` table of squared distances from query subvectors to codewords."""
    q = np.asarray(q)
    if q.ndim != 1:
        raise ShapeError(f"pq_adc_lut takes one query vector, got {q.shape}")
    sub = codebooks.split(q)[0]
    diff = codebooks.centroids - sub[:, None, :]
    return np.einsum("mkd,mkd->mk", diff, diff).astype(np.float32)


def adc_scores(lut: np.ndarray, codes: np.ndarray) -> np.ndarray:
    scores = np.zeros(codes.shape[0], dtype=np.float32)
    for m in range(lut.shape[0]):
        scores += lut[m, codes[:, m]]
    return scores


def pq_search(codebooks: PqCodebooks, q, table: CodeTable, k: int) -> tuple[np.ndarray, np.ndarray]:
    if table.N == 0:
        raise EmptyTableError("cannot search an empty code table")
    lut = pq_adc_lut(codebooks, q)
    scores = adc_scores(lut, table.codes)
    ids = smallest_k(scores, k)
    return ids, scores[ids]


def pq_search_batch(codebooks: PqCodebooks, queries, table: CodeTable, k: int):
    queries = np.asarray(queries, dtype=np.float32)
    k_eff = min(k, table.N)
    ids = np.zeros((queries.shape[0], k_eff), dtype=np.int64)
    scores = np.zeros((queries.shape[0], k_eff), dtype=np.float32)
    for i, q in enumerate(queries):
        ids[i], scores[i] = pq_search(codebooks, q, table, k)
    return ids, scores


def save_pq(codebooks: PqCodebooks, path) -> None:
    with open(path, "wb") as f:
        f.write(PQ_MAGIC)
        f.write(struct.pack("<3I", codebooks.D, codebooks.M, codebooks.K))
        f.write(np.ascontiguousarray(codebooks.centroids, dtype="<f4").tobytes())


def load_pq(path) -> PqCodebooks:
    data = Path(path).read_bytes()
    if data[:4] != PQ_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 16:
        raise ValueError(f"{path}: truncated header")
    D, M, K = struct.unpack_from("<3I", data, 4)
    if M == 0 or D % M:
        raise ValueError(f"{path}: invalid header D={D} M={M}")
    expected = 16 + 4 * D * K
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    cents = np.frombuffer(data, dtype="<f4", offset=16).reshape(M, K, D // M)
    return PqCodebooks(cents.astype(np.float32))

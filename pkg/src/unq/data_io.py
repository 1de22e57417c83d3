"""Readers and writers for fvecs/bvecs/ivecs, UNQC code tables, synthetic data.

The *vecs formats are little-endian records: an int32 dimension followed by
that many payload values (float32, uint8 or int32).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .search import CodeTable

CODES_MAGIC = b"UNQC"


class FormatError(ValueError):
    pass


def _read_vecs(path, payload: str) -> np.ndarray:
    data = Path(path).read_bytes()
    itemsize = np.dtype(payload).itemsize
    if not data:
        return np.empty((0, 0), dtype=np.dtype(payload).newbyteorder("="))
    if len(data) < 4:
        raise FormatError(f"{path}: truncated record header at byte 0")
    d = struct.unpack_from("<i", data, 0)[0]
    if d <= 0:
        raise FormatError(f"{path}: non-positive dimension {d} at byte 0")
    rec = 4 + d * itemsize
    if len(data) % rec:
        n_full = len(data) // rec
        raise FormatError(f"{path}: truncated record {n_full} at byte {n_full * rec}")
    n = len(data) // rec
    raw = np.frombuffer(data, dtype=np.uint8).reshape(n, rec)
    dims = raw[:, :4].copy().view("<i4").ravel()
    bad = np.flatnonzero(dims != d)
    if bad.size:
        raise FormatError(f"{path}: record {bad[0]} at byte {bad[0] * rec} has dimension "
                          f"{dims[bad[0]]}, expected {d}")
    return raw[:, 4:].copy().view(payload).astype(np.dtype(payload).newbyteorder("="))


def read_fvecs(path) -> np.ndarray:
    return _read_vecs(path, "<f4")


def read_ivecs(path) -> np.ndarray:
    return _read_vecs(path, "<i4")


def read_bvecs(path) -> np.ndarray:
    """Byte vectors, widened to float32."""
    return _read_vecs(path, "u1").astype(np.float32)


def read_bvecs_raw(path) -> np.ndarray:
    return _read_vecs(path, "u1")


def _write_vecs(path, x, payload: str) -> None:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D array, got {x.shape}")
    n, d = x.shape
    with open(path, "wb") as f:
        if n == 0:
            return
        rec = np.empty((n, 4 + d * np.dtype(payload).itemsize), dtype=np.uint8)
        rec[:, :4] = np.frombuffer(struct.pack("<i", d), dtype=np.uint8)
        rec[:, 4:] = np.ascontiguousarray(x, dtype=payload).view(np.uint8).reshape(n, -1)
        f.write(rec.tobytes())


def write_fvecs(path, x) -> None:
    _write_vecs(path, x, "<f4")


def write_ivecs(path, x) -> None:
    _write_vecs(path, x, "<i4")


def write_bvecs(path, x) -> None:
    x = np.asarray(x)
    if x.size and (x.min() < 0 or x.max() > 255 or not np.all(x == np.round(x))):
        raise ValueError("bvecs payload must be integers in [0, 255]")
    _write_vecs(path, x, "u1")


def write_codes(path, table: CodeTable) -> None:
    """``UNQC`` + (N, M, K) as uint32 + N*M raw bytes, row-major."""
    with open(path, "wb") as f:
        f.write(CODES_MAGIC)
        f.write(struct.pack("<3I", table.N, table.M, table.K))
        f.write(np.ascontiguousarray(table.codes, dtype=np.uint8).tobytes())


def read_codes(path) -> CodeTable:
    data = Path(path).read_bytes()
    if data[:4] != CODES_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header at byte {len(data)}")
    n, m, k = struct.unpack_from("<3I", data, 4)
    if len(data) != 16 + n * m:
        raise FormatError(f"{path}: header says {n}x{m} codes but payload has {len(data) - 16} bytes")
    codes = np.frombuffer(data, dtype=np.uint8, offset=16).reshape(n, m).copy()
    return CodeTable(codes, K=k)


@dataclass
class DatasetBundle:
    train: np.ndarray
    base: np.ndarray
    queries: np.ndarray
    ground_truth: np.ndarray | None = None

    @property
    def D(self) -> int:
        return self.base.shape[1]


def synth_dataset(n_train: int, n_base: int, n_query: int, D: int, n_components: int = 16,
                  seed: int = 0, separation: float = 1.0, lattice_extent: int = 3) -> DatasetBundle:
    """Seeded Gaussian mixture.

    Component means are distinct random points of the integer lattice
    ``{0..lattice_extent-1}^D`` scaled by ``separation``; each component is
    isotropic with standard deviation ``0.1 * separation``.  Train, base and
    query rows come from three independent child streams of ``seed``.
    """
    if min(n_train, n_base, n_query, D, n_components) <= 0:
        raise ValueError("all sizes must be positive")
    if lattice_extent ** D < n_components:
        raise ValueError(f"lattice {lattice_extent}^{D} has fewer than {n_components} points")
    root = np.random.SeedSequence(seed)
    mean_ss, *part_ss = root.spawn(4)
    mrng = np.random.default_rng(mean_ss)
    means = set()
    rows = []
    while len(rows) < n_components:
        p = tuple(mrng.integers(0, lattice_extent, size=D).tolist())
        if p not in means:
            means.add(p)
            rows.append(p)
    centers = np.asarray(rows, dtype=np.float64) * separation
    sigma = 0.1 * separation

    def draw(ss, n):
        rng = np.random.default_rng(ss)
        comp = rng.integers(0, n_components, size=n)
        return (centers[comp] + sigma * rng.standard_normal((n, D))).astype(np.float32)

    return DatasetBundle(*(draw(ss, n) for ss, n in zip(part_ss, (n_train, n_base, n_query))))

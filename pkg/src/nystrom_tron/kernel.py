"""Gaussian kernel evaluation and worker-local blocks of C and W."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .data import ConfigurationError, SparseExample, Shard, format_features, to_csr

KERNELS = ("gaussian",)


@dataclass(frozen=True)
class HyperParams:
    lam: float
    sigma: float

    def __post_init__(self):
        if not (self.lam > 0 and self.sigma > 0):
            raise ConfigurationError(
                f"lambda and sigma must be positive, got {self.lam}, {self.sigma}"
            )


@dataclass(frozen=True, eq=False)
class BasisSet:
    """The m basis points, stored as the rows of a CSR matrix."""

    points: sp.csr_matrix
    source: str
    sigma: float
    origin_ids: np.ndarray | None = None  # training-set row of each point, if any

    def __post_init__(self):
        pts = sp.csr_matrix(self.points, dtype=np.float64)
        pts.sort_indices()
        if pts.shape[0] < 1:
            raise ConfigurationError("a basis set needs at least one point")
        if self.source not in ("random", "kmeans", "given"):
            raise ValueError(f"unknown basis source {self.source!r}")
        object.__setattr__(self, "points", pts)

    @property
    def m(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @classmethod
    def from_examples(cls, examples: Sequence[SparseExample], d: int, sigma: float,
                      source: str = "random") -> "BasisSet":
        return cls(to_csr(examples, d), source, sigma)

    def with_dim(self, d: int) -> sp.csr_matrix:
        return _resize(self.points, d)

    def row(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        p = self.points
        sl = slice(p.indptr[k], p.indptr[k + 1])
        return p.indices[sl].astype(np.int64), p.data[sl]

    def to_text(self) -> str:
        lines = [format_features(*self.row(k)) for k in range(self.m)]
        return "".join(f"{k} {line}".rstrip() + "\n" for k, line in enumerate(lines))

    def digest(self) -> bytes:
        """SHA-256 over dimension, sigma and exact row contents."""
        h = hashlib.sha256()
        p = self.points
        h.update(struct.pack("<QQd", p.shape[0], p.shape[1], self.sigma))
        for arr in (p.indptr.astype("<i8"), p.indices.astype("<i8"), p.data.astype("<f8")):
            h.update(arr.tobytes())
        return h.digest()

    def append(self, new_points: sp.csr_matrix, new_ids=None) -> "BasisSet":
        d = max(self.dim, new_points.shape[1])
        pts = sp.vstack([self.with_dim(d), _resize(sp.csr_matrix(new_points), d)], format="csr")
        ids = None
        if self.origin_ids is not None and new_ids is not None:
            ids = np.concatenate([self.origin_ids, np.asarray(new_ids, dtype=np.int64)])
        return BasisSet(pts, self.source, self.sigma, ids)

    def to_bytes(self) -> bytes:
        p = self.points
        head = struct.pack("<QQQd", p.shape[0], p.shape[1], p.nnz, self.sigma)
        src = self.source.encode().ljust(8, b" ")
        ids = b"" if self.origin_ids is None else np.asarray(self.origin_ids, "<i8").tobytes()
        return (head + src + struct.pack("<B", self.origin_ids is not None)
                + p.indptr.astype("<i8").tobytes() + p.indices.astype("<i8").tobytes()
                + p.data.astype("<f8").tobytes() + ids)

    @classmethod
    def from_bytes(cls, b: bytes) -> "BasisSet":
        m, d, nnz, sigma = struct.unpack_from("<QQQd", b)
        pos = 32
        source = b[pos:pos + 8].decode().strip()
        (has_ids,) = struct.unpack_from("<B", b, pos + 8)
        pos += 9

        def take(n, dt):
            nonlocal pos
            arr = np.frombuffer(b, dtype=dt, count=n, offset=pos)
            pos += 8 * n
            return arr.astype(np.int64 if dt == "<i8" else np.float64)

        indptr, indices, data = take(m + 1, "<i8"), take(nnz, "<i8"), take(nnz, "<f8")
        ids = take(m, "<i8") if has_ids else None
        return cls(sp.csr_matrix((data, indices, indptr), shape=(m, d)), source, sigma, ids)


@dataclass(frozen=True, eq=False)
class KernelBlock:
    """A worker's rows of C, its assigned rows of W, and aligned labels.

    ``w_row_ids`` lists which global rows of W this worker holds;
    ``kernel_evals`` counts scalar kernel evaluations spent building it.
    """

    c_block: np.ndarray
    w_rows: np.ndarray
    w_row_ids: np.ndarray
    labels: np.ndarray
    kernel_evals: int = 0

    @property
    def m(self) -> int:
        return self.c_block.shape[1]

    @property
    def n(self) -> int:
        return self.c_block.shape[0]


def _resize(X: sp.csr_matrix, d: int) -> sp.csr_matrix:
    if X.shape[1] == d:
        return X
    if X.shape[1] > d and X.nnz and X.indices.max() >= d:
        raise ValueError("cannot shrink a matrix with nonzeros past the new width")
    return sp.csr_matrix((X.data, X.indices, X.indptr), shape=(X.shape[0], d))


def _as_sparse_pair(x):
    if isinstance(x, SparseExample):
        return x.indices, x.values
    if isinstance(x, tuple):
        return np.asarray(x[0]), np.asarray(x[1], dtype=np.float64)
    arr = np.asarray(x, dtype=np.float64).ravel()
    nz = np.flatnonzero(arr)
    return nz, arr[nz]


def gaussian(x, xbar, sigma: float) -> float:
    """exp(-||x - xbar||^2 / (2 sigma^2)) for sparse or dense vectors.

    ``x`` and ``xbar`` may be ``SparseExample``, ``(indices, values)`` pairs
    or dense 1-D arrays.
    """
    if not sigma > 0:
        raise ConfigurationError("sigma must be positive")
    xi, xv = _as_sparse_pair(x)
    bi, bv = _as_sparse_pair(xbar)
    _, ia, ib = np.intersect1d(xi, bi, assume_unique=True, return_indices=True)
    dot = float(np.dot(xv[ia], bv[ib]))
    sq = max(float(np.dot(xv, xv)) + float(np.dot(bv, bv)) - 2.0 * dot, 0.0)
    return float(np.exp(-sq / (2.0 * sigma * sigma)))


def sq_row_norms(X: sp.csr_matrix) -> np.ndarray:
    return np.asarray(X.multiply(X).sum(axis=1)).ravel()


def kernel_matrix(X: sp.csr_matrix, B: sp.csr_matrix, sigma: float,
                  kernel: str = "gaussian", x_norms=None, b_norms=None) -> np.ndarray:
    """Dense matrix of k(X[i], B[k]); rows are computed independently of each other."""
    if kernel not in KERNELS:
        raise ValueError(f"unsupported kernel {kernel!r}; available: {KERNELS}")
    d = max(X.shape[1], B.shape[1])
    X, B = _resize(sp.csr_matrix(X), d), _resize(sp.csr_matrix(B), d)
    if x_norms is None:
        x_norms = sq_row_norms(X)
    if b_norms is None:
        b_norms = sq_row_norms(B)
    cross = (X @ B.T).toarray()
    sq = x_norms[:, None] + b_norms[None, :] - 2.0 * cross
    np.maximum(sq, 0.0, out=sq)
    sq *= -1.0 / (2.0 * sigma * sigma)
    return np.exp(sq, out=sq)


def w_row_ranges(m: int, p: int) -> list[range]:
    """Contiguous row ranges of W of size ceil(m/p); trailing workers may get none."""
    step = -(-m // p)
    return [range(min(j * step, m), min((j + 1) * step, m)) for j in range(p)]


def build_kernel_block(shard: Shard, basis: BasisSet, params: HyperParams,
                       w_row_range=None, kernel: str = "gaussian") -> KernelBlock:
    """Materialize this worker's rows of C and its slice of W.

    ``w_row_range`` is a range, slice or index array into ``0..m-1``;
    ``None`` means all rows.
    """
    m = basis.m
    if w_row_range is None:
        rows = np.arange(m)
    elif isinstance(w_row_range, slice):
        rows = np.arange(m)[w_row_range]
    else:
        rows = np.asarray(list(w_row_range) if isinstance(w_row_range, range) else w_row_range,
                          dtype=np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= m):
        raise ConfigurationError(f"W row range {w_row_range} outside 0..{m - 1}")

    d = max(basis.dim, max((e.dim for e in shard.examples), default=0))
    X = shard.matrix(d)
    B = basis.with_dim(d)
    b_norms = sq_row_norms(B)
    c_block = kernel_matrix(X, B, params.sigma, kernel, b_norms=b_norms)
    w_rows = kernel_matrix(B[rows], B, params.sigma, kernel, x_norms=b_norms[rows], b_norms=b_norms)
    return KernelBlock(
        c_block=c_block,
        w_rows=w_rows,
        w_row_ids=rows,
        labels=shard.labels,
        kernel_evals=X.shape[0] * m + rows.size * m,
    )


def extend_kernel_block(block: KernelBlock, shard: Shard, old_basis: BasisSet,
                        new_basis: BasisSet, new_rows, params: HyperParams,
                        kernel: str = "gaussian") -> KernelBlock:
    """Grow a block from ``old_basis.m`` to ``new_basis.m`` columns.

    Only kernel values involving the appended points are evaluated: the new
    columns of C, the new columns of the W rows already held, and the newly
    assigned W rows ``new_rows`` (global ids >= old m).
    """
    m_old, m_new = old_basis.m, new_basis.m
    q = m_new - m_old
    new_rows = np.asarray(list(new_rows), dtype=np.int64)
    if q == 0:
        return block
    if new_rows.size and (new_rows.min() < m_old or new_rows.max() >= m_new):
        raise ConfigurationError("new W rows must index the appended basis points")

    d = max(new_basis.dim, max((e.dim for e in shard.examples), default=0))
    B = new_basis.with_dim(d)
    b_norms = sq_row_norms(B)
    B_new, n_new = B[m_old:], b_norms[m_old:]
    X = shard.matrix(d)
    c_extra = kernel_matrix(X, B_new, params.sigma, kernel, b_norms=n_new)
    old_ids = block.w_row_ids
    w_extra = kernel_matrix(B[old_ids], B_new, params.sigma, kernel,
                            x_norms=b_norms[old_ids], b_norms=n_new)
    w_new = kernel_matrix(B[new_rows], B, params.sigma, kernel,
                          x_norms=b_norms[new_rows], b_norms=b_norms)
    w_rows = np.vstack([np.hstack([block.w_rows, w_extra]), w_new])
    evals = X.shape[0] * q + old_ids.size * q + new_rows.size * m_new
    return KernelBlock(
        c_block=np.hstack([block.c_block, c_extra]),
        w_rows=w_rows,
        w_row_ids=np.concatenate([old_ids, new_rows]),
        labels=block.labels,
        kernel_evals=block.kernel_evals + evals,
    )


def parse_basis_lines(lines: Sequence[str], m: int, d: int) -> sp.csr_matrix:
    indptr, indices, data = [0], [], []
    for k, line in enumerate(lines):
        toks = line.split()
        if not toks or int(toks[0]) != k:
            raise ValueError(f"basis line {k} malformed: {line!r}")
        for tok in toks[1:]:
            i, v = tok.split(":")
            indices.append(int(i) - 1)
            data.append(float(v))
        indptr.append(len(indices))
    if len(lines) != m:
        raise ValueError(f"expected {m} basis lines, got {len(lines)}")
    return sp.csr_matrix((np.array(data, dtype=np.float64), np.array(indices, dtype=np.int64),
                          np.array(indptr, dtype=np.int64)), shape=(m, d))


_BLOCK_MAGIC = b"KBLK"
_BLOCK_HEADER = struct.Struct("<4sIQQd32sQ")


def save_kernel_block(path, block: KernelBlock, sigma: float, basis_digest: bytes) -> None:
    """Cache a block: header (n_j, m, sigma, basis hash, #W rows), then LE float64 payloads."""
    with open(path, "wb") as fh:
        fh.write(_BLOCK_HEADER.pack(_BLOCK_MAGIC, 1, block.n, block.m, sigma,
                                    basis_digest, block.w_row_ids.size))
        fh.write(block.w_row_ids.astype("<i8").tobytes())
        fh.write(block.labels.astype("<f8").tobytes())
        fh.write(np.ascontiguousarray(block.c_block, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(block.w_rows, dtype="<f8").tobytes())


def load_kernel_block(path, sigma: float | None = None, basis_digest: bytes | None = None):
    """Read a cached block; mismatched sigma or basis hash raises ``ValueError``."""
    with open(path, "rb") as fh:
        magic, version, n, m, sig, digest, nw = _BLOCK_HEADER.unpack(fh.read(_BLOCK_HEADER.size))
        if magic != _BLOCK_MAGIC or version != 1:
            raise ValueError(f"{path}: not a kernel block cache")
        if sigma is not None and sig != sigma:
            raise ValueError(f"{path}: cached sigma {sig} != {sigma}")
        if basis_digest is not None and digest != basis_digest:
            raise ValueError(f"{path}: basis hash mismatch")
        rows = np.frombuffer(fh.read(8 * nw), dtype="<i8").astype(np.int64)
        labels = np.frombuffer(fh.read(8 * n), dtype="<f8").astype(np.float64)
        c = np.frombuffer(fh.read(8 * n * m), dtype="<f8").reshape(n, m).astype(np.float64)
        w = np.frombuffer(fh.read(8 * nw * m), dtype="<f8").reshape(nw, m).astype(np.float64)
    return KernelBlock(c, w, rows, labels), sig, digest

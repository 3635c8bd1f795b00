"""Basis-point selection: per-worker random sampling, distributed K-means, stage-wise growth.

The ``*_spmd`` functions run on every worker with a
:class:`~nystrom_tron.allreduce.Communicator`; the plain functions take the
full list of shards and run the same code on an in-process cluster.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .allreduce import LocalCluster, pack_vector, unpack_vector
from .data import ConfigurationError, Shard, chunk_bounds, make_rng, n_features
from .kernel import (BasisSet, KernelBlock, _resize, extend_kernel_block, parse_basis_lines,
                     sq_row_norms)
from .objective import ModelState

logger = logging.getLogger(__name__)

KMEANS_MAX_M = 5000
KMEANS_MAX_FEATURES = 1000


def quotas(m: int, p: int) -> np.ndarray:
    """floor(m/p) per worker, plus one for the first m mod p workers."""
    return np.diff(chunk_bounds(m, p))


def _local_sample(shard: Shard, quota: int, seed: int, exclude=None) -> np.ndarray:
    """Positions (within the shard) of ``quota`` distinct examples."""
    pool = np.arange(len(shard))
    if exclude is not None and len(exclude):
        pool = pool[~np.isin(shard.global_ids, np.asarray(list(exclude)))]
    if quota > pool.size:
        raise ConfigurationError(
            f"worker {shard.worker_id}: quota {quota} exceeds its {pool.size} available examples"
        )
    rng = make_rng(np.random.SeedSequence([seed, shard.worker_id]).generate_state(1)[0])
    return pool[rng.choice(pool.size, size=quota, replace=False)]


def _rows(shard: Shard, pos: np.ndarray, d: int) -> sp.csr_matrix:
    return shard.matrix(d)[pos]


def select_random(shards: Sequence[Shard], m: int, seed: int, sigma: float = 1.0,
                  exclude=None) -> BasisSet:
    """Each worker draws its quota of distinct examples from its own shard.

    Points are ordered by worker, then by draw. ``exclude`` is a set of
    global example ids that may not be drawn (used when growing a basis).
    """
    p = len(shards)
    n = sum(len(s) for s in shards)
    if m < 1 or m > n:
        raise ConfigurationError(f"need 1 <= m <= n, got m={m}, n={n}")
    d = n_features(e for s in shards for e in s.examples)
    picks = [_local_sample(s, int(q), seed, exclude) for s, q in zip(shards, quotas(m, p))]
    pts = sp.vstack([_rows(s, pos, d) for s, pos in zip(shards, picks)], format="csr")
    ids = np.concatenate([s.global_ids[pos] for s, pos in zip(shards, picks)])
    return BasisSet(pts, "random", sigma, ids)


def _pack_rows(rows: sp.csr_matrix, ids: np.ndarray) -> bytes:
    rows = sp.csr_matrix(rows)
    return BasisSet(rows, "random", 1.0, ids).to_bytes() if rows.shape[0] else b""


def _merge_gathered(blobs: Sequence[bytes], sigma: float, source: str) -> BasisSet:
    parts = [BasisSet.from_bytes(b) for b in blobs if b]
    d = max(b.dim for b in parts)
    pts = sp.vstack([b.with_dim(d) for b in parts], format="csr")
    ids = np.concatenate([b.origin_ids for b in parts])
    return BasisSet(pts, source, sigma, ids)


def select_random_spmd(comm, shard: Shard, m: int, seed: int, sigma: float,
                       exclude=None) -> BasisSet:
    """Distributed :func:`select_random`: local draw, gather at root, broadcast the union."""
    q = int(quotas(m, comm.p)[comm.rank])
    d = max((e.dim for e in shard.examples), default=0)
    pos = _local_sample(shard, q, seed, exclude)
    blobs = comm.gather(_pack_rows(_rows(shard, pos, d), shard.global_ids[pos]))
    payload = _merge_gathered(blobs, sigma, "random").to_bytes() if comm.is_root else None
    return BasisSet.from_bytes(comm.broadcast(payload))


def _global_sample_spmd(comm, shard: Shard, m: int, seed: int, d: int):
    """m distinct examples drawn uniformly from the concatenation of all shards.

    The draw depends only on ``seed`` and the shard order, not on ``p``.
    """
    sizes = np.zeros(comm.p)
    sizes[comm.rank] = len(shard)
    sizes = comm.allreduce_sum(sizes).astype(np.int64)
    n = int(sizes.sum())
    if m > n:
        raise ConfigurationError(f"m={m} exceeds n={n}")
    offset = int(sizes[: comm.rank].sum())
    chosen = make_rng(seed).choice(n, size=m, replace=False)
    mine = np.flatnonzero((chosen >= offset) & (chosen < offset + len(shard)))
    dense = np.zeros((m, d))
    X = shard.matrix(d)
    if mine.size:
        dense[mine] = X[chosen[mine] - offset].toarray()
    return comm.allreduce_sum(dense.ravel()).reshape(m, d), n


@dataclass
class KMeansResult:
    centers: np.ndarray
    history: list = field(default_factory=list)  # within-cluster sum of squares per iteration
    counts: np.ndarray | None = None
    reseeded: int = 0


def _top_far(dist_min: np.ndarray, gids: np.ndarray, k: int) -> np.ndarray:
    order = np.lexsort((gids, -dist_min))
    return order[:k]


def kmeans_spmd(comm, shard: Shard, m: int, iters: int, seed: int, d: int | None = None) -> KMeansResult:
    """Lloyd iterations with per-iteration allreduce of (sums, counts, cost).

    Centers start from a p-independent uniform draw of m training points.
    An empty cluster is re-seeded with the point farthest from its assigned
    center (ties to the lowest global id), excluding points already used.
    """
    if iters < 1:
        raise ConfigurationError("K-means needs at least one iteration")
    if d is None:
        dims = np.zeros(comm.p)
        dims[comm.rank] = max((e.dim for e in shard.examples), default=0)
        d = int(comm.allreduce_sum(dims).max())
    centers, n = _global_sample_spmd(comm, shard, m, seed, d)
    X = shard.matrix(d)
    xn = sq_row_norms(X)
    gids = np.asarray(shard.global_ids)
    res = KMeansResult(centers)
    for _ in range(iters):
        cn = np.einsum("ij,ij->i", centers, centers)
        dist = xn[:, None] + cn[None, :] - 2.0 * (X @ centers.T)
        np.maximum(dist, 0.0, out=dist)
        assign = np.argmin(dist, axis=1) if len(shard) else np.zeros(0, dtype=np.int64)
        dmin = dist[np.arange(len(shard)), assign]
        onehot = sp.csr_matrix((np.ones(len(shard)), (assign, np.arange(len(shard)))),
                               shape=(m, len(shard)))
        sums = np.asarray((onehot @ X).todense())
        counts = np.bincount(assign, minlength=m).astype(np.float64)
        buf = np.concatenate([sums.ravel(), counts, [dmin.sum()]])
        tot = comm.allreduce_sum(buf)
        sums = tot[: m * d].reshape(m, d)
        counts = tot[m * d: m * d + m]
        res.history.append(float(tot[-1]))
        empty = np.flatnonzero(counts == 0)
        nonempty = counts > 0
        centers = centers.copy()
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        if empty.size:
            centers[empty] = _reseed_spmd(comm, X, dmin, gids, empty.size, d)
            res.reseeded += empty.size
        res.counts = counts
    res.centers = centers
    return res


def _reseed_spmd(comm, X, dmin, gids, k: int, d: int) -> np.ndarray:
    top = _top_far(dmin, gids, k)
    local = np.concatenate([
        np.array([top.size], dtype=np.float64),
        dmin[top], gids[top].astype(np.float64), X[top].toarray().ravel(),
    ])
    blobs = comm.gather(pack_vector(local))
    if comm.is_root:
        cand_d, cand_g, cand_x = [], [], []
        for b in blobs:
            v = unpack_vector(b)
            t = int(v[0])
            cand_d.append(v[1:1 + t])
            cand_g.append(v[1 + t:1 + 2 * t])
            cand_x.append(v[1 + 2 * t:].reshape(t, d))
        cd, cg, cx = np.concatenate(cand_d), np.concatenate(cand_g), np.vstack(cand_x)
        pick = np.lexsort((cg, -cd))[:k]
        payload = pack_vector(cx[pick].ravel())
    else:
        payload = None
    return unpack_vector(comm.broadcast(payload)).reshape(k, d)


def centers_to_basis(centers: np.ndarray, sigma: float) -> BasisSet:
    pts = sp.csr_matrix(centers)
    pts.eliminate_zeros()
    return BasisSet(pts, "kmeans", sigma)


def select_kmeans(shards: Sequence[Shard], m: int, iters: int = 3, seed: int = 0,
                  sigma: float = 1.0, cluster=None) -> tuple[BasisSet, KMeansResult]:
    """Distributed K-means over the shards (one in-process worker per shard)."""
    n = sum(len(s) for s in shards)
    if m > n:
        raise ConfigurationError(f"m={m} exceeds n={n}")
    d = n_features(e for s in shards for e in s.examples)
    cluster = cluster or LocalCluster(len(shards))

    def work(comm):
        return kmeans_spmd(comm, shards[comm.rank], m, iters, seed, d)

    res = cluster.run(work)[0]
    return centers_to_basis(res.centers, sigma), res


def use_kmeans(m: int, d: int, max_m: int = KMEANS_MAX_M, max_features: int = KMEANS_MAX_FEATURES) -> bool:
    """K-means for moderate m on low-dimensional data; random selection otherwise."""
    return m <= max_m and d < max_features


# -- stage-wise growth --------------------------------------------------------

def dedupe_new_points(basis: BasisSet, new_points: sp.csr_matrix, new_ids=None):
    """Drop new points that duplicate an existing basis point or each other (with a warning)."""
    d = max(basis.dim, new_points.shape[1])
    seen = {_row_key(basis.with_dim(d), k) for k in range(basis.m)}
    new_points = _resize(sp.csr_matrix(new_points), d)
    keep = []
    for k in range(new_points.shape[0]):
        key = _row_key(new_points, k)
        if key in seen:
            warnings.warn(f"skipping duplicate basis point {k}", RuntimeWarning, stacklevel=3)
            continue
        seen.add(key)
        keep.append(k)
    keep = np.asarray(keep, dtype=np.int64)
    ids = None if new_ids is None else np.asarray(new_ids)[keep]
    return new_points[keep], ids


def _row_key(X: sp.csr_matrix, k: int):
    sl = slice(X.indptr[k], X.indptr[k + 1])
    return X.indices[sl].tobytes(), X.data[sl].tobytes()


def new_row_assignment(m_old: int, q: int, p: int) -> list[np.ndarray]:
    """Contiguous chunks of the q new W rows, ceil(q/p) per worker."""
    step = -(-q // p) if q else 0
    return [np.arange(m_old + min(j * step, q), m_old + min((j + 1) * step, q)) for j in range(p)]


def extend_model(model: ModelState, new_points, blocks: Sequence[KernelBlock],
                 shards: Sequence[Shard], new_ids=None):
    """Append basis points, pad beta with zeros and grow each worker's block.

    Returns ``(model, blocks)``. Existing kernel columns are reused; only
    values that involve the new points are computed.
    """
    new_points, new_ids = dedupe_new_points(model.basis, new_points, new_ids)
    q = new_points.shape[0]
    if q == 0:
        return model, list(blocks)
    old = model.basis
    basis = old.append(new_points, new_ids)
    rows = new_row_assignment(old.m, q, len(blocks))
    grown = [
        extend_kernel_block(b, s, old, basis, r, model.params)
        for b, s, r in zip(blocks, shards, rows)
    ]
    beta = np.concatenate([model.beta, np.zeros(q)])
    return ModelState(beta, basis, model.params, model.loss), grown


# -- basis file ---------------------------------------------------------------

def save_basis(path, basis: BasisSet, seed: int | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#basis m={basis.m} sigma={basis.sigma!r} source={basis.source} "
                 f"seed={'' if seed is None else seed} d={basis.dim}\n")
        fh.write(basis.to_text())


def load_basis(path) -> tuple[BasisSet, int | None]:
    with open(path, encoding="utf-8") as fh:
        head = fh.readline().split()
        if not head or head[0] != "#basis":
            raise ValueError(f"{path}: missing #basis header")
        meta = dict(t.split("=", 1) for t in head[1:])
        m = int(meta["m"])
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    d = int(meta["d"]) if meta.get("d") else 0
    if not d:
        d = max((int(t.split(":")[0]) for ln in lines for t in ln.split()[1:]), default=0)
    pts = parse_basis_lines(lines, m, d)
    seed = int(meta["seed"]) if meta.get("seed") else None
    return BasisSet(pts, meta["source"], float(meta["sigma"])), seed


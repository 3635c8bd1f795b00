"""Sparse labeled examples, libsvm text I/O and random sharding over workers."""

from __future__ import annotations

import gzip
import io
import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

GZIP_MAGIC = b"\x1f\x8b"


class ParseError(ValueError):
    """Malformed libsvm line."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class UnsupportedLabelError(ParseError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SparseExample:
    """One training point.

    ``indices`` are 0-based feature ids, strictly increasing, with no stored
    zeros in ``values``. ``label`` is +1 or -1.
    """

    indices: np.ndarray
    values: np.ndarray
    label: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        if idx.shape != val.shape or idx.ndim != 1:
            raise ValueError("indices and values must be 1-D arrays of equal length")
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0):
            raise ValueError("indices must be non-negative and strictly increasing")
        if np.any(val == 0.0):
            keep = val != 0.0
            idx, val = idx[keep], val[keep]
        if self.label not in (1, -1):
            raise ValueError(f"label must be +1 or -1, got {self.label!r}")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)
        object.__setattr__(self, "label", int(self.label))

    def __eq__(self, other):
        if not isinstance(other, SparseExample):
            return NotImplemented
        return (
            self.label == other.label
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )

    @property
    def dim(self) -> int:
        """Smallest feature dimension that holds this example."""
        return int(self.indices[-1]) + 1 if self.indices.size else 0

    def sq_norm(self) -> float:
        return float(np.dot(self.values, self.values))

    def to_dense(self, d: int) -> np.ndarray:
        out = np.zeros(d)
        out[self.indices] = self.values
        return out


@dataclass(frozen=True, eq=False)
class Shard:
    worker_id: int
    examples: tuple
    global_ids: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self):
        return len(self.examples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.examples], dtype=np.float64)

    def matrix(self, d: int) -> sp.csr_matrix:
        """The shard's feature rows as a CSR matrix with ``d`` columns (cached)."""
        if d not in self._cache:
            self._cache[d] = to_csr(self.examples, d)
        return self._cache[d]


def n_features(examples: Iterable[SparseExample]) -> int:
    return max((e.dim for e in examples), default=0)


def to_csr(examples: Sequence[SparseExample], d: int | None = None) -> sp.csr_matrix:
    if d is None:
        d = n_features(examples)
    indptr = np.zeros(len(examples) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([e.indices.size for e in examples])
    if len(examples):
        indices = np.concatenate([e.indices for e in examples])
        data = np.concatenate([e.values for e in examples])
    else:
        indices = np.zeros(0, dtype=np.int64)
        data = np.zeros(0)
    if indices.size and indices.max() >= d:
        raise ValueError(f"feature index {indices.max()} out of range for d={d}")
    return sp.csr_matrix((data, indices, indptr), shape=(len(examples), d))


def from_dense(X, y) -> list[SparseExample]:
    """Build examples from a dense matrix and a label vector."""
    X = np.asarray(X, dtype=np.float64)
    out = []
    for row, label in zip(X, y):
        nz = np.flatnonzero(row)
        out.append(SparseExample(nz, row[nz], int(label)))
    return out


def _parse_label(tok: str, lineno: int) -> int:
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(lineno, f"cannot parse label {tok!r}") from None
    if v == 1.0:
        return 1
    if v == -1.0:
        return -1
    if v == 0.0:
        return 0
    raise UnsupportedLabelError(lineno, f"non-binary label {tok!r}")


def _parse_features(tokens: Sequence[str], lineno: int):
    idx = np.empty(len(tokens), dtype=np.int64)
    val = np.empty(len(tokens), dtype=np.float64)
    for j, tok in enumerate(tokens):
        k, sep, v = tok.partition(":")
        if not sep:
            raise ParseError(lineno, f"expected <index>:<value>, got {tok!r}")
        try:
            idx[j] = int(k)
            val[j] = float(v)
        except ValueError:
            raise ParseError(lineno, f"bad feature token {tok!r}") from None
    if idx.size:
        if idx.min() < 1:
            raise ParseError(lineno, "feature indices are 1-based")
        if np.any(np.diff(idx) <= 0):
            raise ParseError(lineno, "feature indices must be strictly increasing")
    keep = val != 0.0
    return idx[keep] - 1, val[keep]


def parse_dataset(stream: TextIO) -> list[SparseExample]:
    """Parse libsvm text ``<label> <idx>:<val> ...`` into examples, in file order.

    Labels must be +1/-1; a 0/1 file is remapped to -1/+1 with a warning.
    Blank lines and ``#`` comment lines are skipped.
    """
    raw = []
    saw_zero = False
    for lineno, line in enumerate(stream, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        label = _parse_label(tokens[0], lineno)
        saw_zero |= label == 0
        idx, val = _parse_features(tokens[1:], lineno)
        raw.append((label, idx, val, lineno))

    if saw_zero:
        if any(label == -1 for label, *_ in raw):
            lineno = next(ln for label, *_, ln in raw if label == 0)
            raise UnsupportedLabelError(lineno, "mixed 0 and -1 labels")
        logger.warning("remapping 0/1 labels to -1/+1")
    return [
        SparseExample(idx, val, -1 if label == 0 else label) for label, idx, val, _ in raw
    ]


def open_text(path: str | os.PathLike) -> TextIO:
    """Open plain or gzip-compressed text, sniffing the magic bytes."""
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == GZIP_MAGIC:
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, "r", encoding="utf-8")


def load_dataset(path: str | os.PathLike) -> list[SparseExample]:
    with open_text(path) as fh:
        return parse_dataset(fh)


def format_features(indices: np.ndarray, values: np.ndarray) -> str:
    return " ".join(f"{int(i) + 1}:{float(v)!r}" for i, v in zip(indices, values))


def format_example(example: SparseExample) -> str:
    """One libsvm line; ``repr`` floats so parsing back is exact."""
    feats = format_features(example.indices, example.values)
    label = "+1" if example.label == 1 else "-1"
    return f"{label} {feats}" if feats else label


def write_dataset(examples: Iterable[SparseExample], stream: TextIO) -> None:
    for e in examples:
        stream.write(format_example(e) + "\n")


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; streams are stable across platforms."""
    return np.random.Generator(np.random.PCG64(seed))


def chunk_bounds(n: int, p: int) -> np.ndarray:
    """Boundaries of ``p`` contiguous chunks of ``n`` items, sizes differing by at most 1."""
    base, extra = divmod(n, p)
    sizes = np.full(p, base, dtype=np.int64)
    sizes[:extra] += 1
    return np.concatenate([[0], np.cumsum(sizes)])


def shard_random(examples: Sequence[SparseExample], p: int, seed: int) -> list[Shard]:
    """Randomly distribute examples over ``p`` workers.

    A seeded permutation of ``range(n)`` is cut into ``p`` contiguous chunks,
    so concatenating the shards in worker order gives the same permutation
    for every ``p``.
    """
    n = len(examples)
    if p < 1:
        raise ConfigurationError(f"worker count must be >= 1, got {p}")
    if p > n:
        raise ConfigurationError(f"{p} workers but only {n} examples")
    perm = make_rng(seed).permutation(n)
    bounds = chunk_bounds(n, p)
    shards = []
    for j in range(p):
        ids = perm[bounds[j] : bounds[j + 1]]
        ids.setflags(write=False)
        shards.append(Shard(j, tuple(examples[i] for i in ids), ids))
    return shards

"""Sparse data storage with a block partition over columns, LIBSVM I/O and
synthetic problem generators."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np
from scipy import sparse


class LibsvmParseError(ValueError):
    """Raised for malformed LIBSVM input; carries the 1-based line number."""

    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


def make_rng(seed: int) -> np.random.Generator:
    # Philox is counter-based, so streams are reproducible across platforms.
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass(frozen=True)
class BlockPartition:
    """Contiguous partition of ``n`` coordinates into ``N`` blocks.

    Block ``i`` covers ``offsets[i]:offsets[i+1]``.
    """

    offsets: np.ndarray

    def __post_init__(self):
        off = np.asarray(self.offsets, dtype=np.int64)
        if off.ndim != 1 or len(off) < 2 or off[0] != 0:
            raise ValueError("offsets must start at 0 and hold at least two entries")
        if np.any(np.diff(off) < 1):
            raise ValueError("every block needs at least one coordinate")
        off.setflags(write=False)
        object.__setattr__(self, "offsets", off)

    @property
    def n(self) -> int:
        return int(self.offsets[-1])

    @property
    def num_blocks(self) -> int:
        return len(self.offsets) - 1

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def block(self, i: int) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def block_ids(self) -> np.ndarray:
        """Block index of every coordinate."""
        return np.repeat(np.arange(self.num_blocks), self.sizes)


def make_partition(n: int, block_size: int) -> BlockPartition:
    """Consecutive blocks of ``block_size`` coordinates; the last one may be shorter."""
    if n < 1 or block_size < 1:
        raise ValueError("n and block_size must be positive")
    offsets = list(range(0, n, block_size)) + [n]
    return BlockPartition(np.array(offsets))


@dataclass
class BlockView:
    """Dense copy of one column block restricted to the rows it touches.

    ``rows is None`` means every row is touched and ``dense`` has ``ell`` rows.
    """

    rows: np.ndarray | None
    dense: np.ndarray
    nnz: int

    def rmatvec(self, w_full: np.ndarray) -> np.ndarray:
        """``A_i^T w`` for a full-length row vector ``w``."""
        w = w_full if self.rows is None else w_full[self.rows]
        return self.dense.T @ w


class BlockedSparseMatrix:
    """Column-compressed matrix with a block partition over its columns.

    Storage follows the usual CSC triplet (``indptr``, ``indices``,
    ``data``). Per-block dense views (see :class:`BlockView`) are built
    lazily; block solvers work on those.
    """

    def __init__(self, shape, indptr, indices, data, partition: BlockPartition | None = None):
        ell, n = int(shape[0]), int(shape[1])
        self.shape = (ell, n)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.data = np.asarray(data, dtype=np.float64)
        if len(self.indptr) != n + 1:
            raise ValueError("indptr must have n + 1 entries")
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= ell):
            raise ValueError("row index out of range")
        if len(self.indices) > 1:
            bad = np.diff(self.indices) <= 0
            starts = self.indptr[1:-1]
            starts = starts[(starts > 0) & (starts < len(self.indices))]
            bad[starts - 1] = False
            if bad.any():
                j = int(np.searchsorted(self.indptr, np.flatnonzero(bad)[0], side="right") - 1)
                raise ValueError(f"row indices of column {j} are not strictly increasing")
        if partition is None:
            partition = make_partition(max(n, 1), 1) if n else None
        if partition is not None and partition.n != n:
            raise ValueError("partition does not cover the columns")
        self.partition = partition
        self._views: dict[int, BlockView] = {}
        self._csc = None
        self._csr = None

    @classmethod
    def from_scipy(cls, mat, partition: BlockPartition | None = None) -> "BlockedSparseMatrix":
        csc = sparse.csc_matrix(mat, dtype=np.float64)
        csc.sum_duplicates()
        csc.sort_indices()
        return cls(csc.shape, csc.indptr, csc.indices, csc.data, partition)

    @classmethod
    def from_dense(cls, arr, partition: BlockPartition | None = None) -> "BlockedSparseMatrix":
        return cls.from_scipy(sparse.csc_matrix(np.asarray(arr, dtype=np.float64)), partition)

    def with_partition(self, partition: BlockPartition) -> "BlockedSparseMatrix":
        return BlockedSparseMatrix(self.shape, self.indptr, self.indices, self.data, partition)

    @property
    def nnz(self) -> int:
        return len(self.data)

    @property
    def num_blocks(self) -> int:
        return self.partition.num_blocks

    def to_scipy(self) -> sparse.csc_matrix:
        if self._csc is None:
            self._csc = sparse.csc_matrix((self.data, self.indices, self.indptr), shape=self.shape)
        return self._csc

    def to_csr(self) -> sparse.csr_matrix:
        if self._csr is None:
            self._csr = self.to_scipy().tocsr()
        return self._csr

    def toarray(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.to_csr() @ x

    def rmatvec(self, w: np.ndarray) -> np.ndarray:
        return self.to_scipy().T @ w

    def block_view(self, i: int) -> BlockView:
        view = self._views.get(i)
        if view is None:
            view = self._build_view(i)
            self._views[i] = view
        return view

    def _build_view(self, i: int) -> BlockView:
        sl = self.partition.block(i)
        lo, hi = self.indptr[sl.start], self.indptr[sl.stop]
        ell = self.shape[0]
        rows = np.unique(self.indices[lo:hi])
        full = len(rows) == ell
        sub = self.to_scipy()[:, sl]
        if full:
            dense = sub.toarray()
            rows = None
        else:
            dense = sub[rows, :].toarray()
        dense.setflags(write=False)
        return BlockView(rows, dense, int(hi - lo))

    def block_nnz(self) -> np.ndarray:
        starts = self.indptr[self.partition.offsets]
        return np.diff(starts)

    def column_norms_sq(self) -> np.ndarray:
        sq = np.zeros(self.shape[1])
        counts = np.diff(self.indptr)
        cols = np.repeat(np.arange(self.shape[1]), counts)
        np.add.at(sq, cols, self.data ** 2)
        return sq


@dataclass
class Dataset:
    matrix: BlockedSparseMatrix
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if len(self.labels) != self.matrix.shape[0]:
            raise ValueError("labels length must equal the number of rows")

    @property
    def shape(self):
        return self.matrix.shape

    def with_partition(self, partition: BlockPartition) -> "Dataset":
        return Dataset(self.matrix.with_partition(partition), self.labels)


def parse_libsvm(stream: TextIO | Iterable[str], n_features: int | None = None) -> Dataset:
    """Parse LIBSVM text (``label idx:val ...`` with 1-based indices).

    Blank lines are skipped. ``n_features`` forces the column count, which
    must be at least the largest index seen.
    """
    labels: list[float] = []
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    lineno = 0
    for lineno, line in enumerate(stream, start=1):
        tokens = line.split()
        if not tokens:
            continue
        try:
            label = float(tokens[0])
        except ValueError:
            raise LibsvmParseError(lineno, f"bad label {tokens[0]!r}") from None
        r = len(labels)
        labels.append(label)
        prev = 0
        for tok in tokens[1:]:
            idx_s, sep, val_s = tok.partition(":")
            if not sep:
                raise LibsvmParseError(lineno, f"malformed token {tok!r}")
            try:
                idx = int(idx_s)
                val = float(val_s)
            except ValueError:
                raise LibsvmParseError(lineno, f"malformed token {tok!r}") from None
            if idx < 1:
                raise LibsvmParseError(lineno, f"index {idx} must be >= 1")
            if idx <= prev:
                raise LibsvmParseError(lineno, f"index {idx} is not increasing")
            prev = idx
            rows.append(r)
            cols.append(idx - 1)
            vals.append(val)
    n_seen = max(cols) + 1 if cols else 0
    if n_features is None:
        n = n_seen
    else:
        if n_features < n_seen:
            raise LibsvmParseError(lineno, f"index {n_seen} exceeds expected dimension {n_features}")
        n = n_features
    ell = len(labels)
    coo = sparse.coo_matrix((vals, (rows, cols)), shape=(ell, n))
    part = make_partition(n, 1) if n else None
    return Dataset(BlockedSparseMatrix.from_scipy(coo, part), np.array(labels))


def load_libsvm(path: str | Path, n_features: int | None = None) -> Dataset:
    with open(path) as fh:
        return parse_libsvm(fh, n_features)


def format_libsvm(ds: Dataset) -> str:
    csr = ds.matrix.to_csr()
    out = []
    for r in range(ds.shape[0]):
        lo, hi = csr.indptr[r], csr.indptr[r + 1]
        feats = " ".join(f"{j + 1}:{float(v)!r}" for j, v in zip(csr.indices[lo:hi], csr.data[lo:hi]))
        label = repr(float(ds.labels[r]))
        out.append(f"{label} {feats}".rstrip() + "\n")
    return "".join(out)


def _scale_blocks(dense: np.ndarray, partition: BlockPartition, targets: np.ndarray) -> np.ndarray:
    """Rescale each column block so its spectral norm equals ``targets[i]``."""
    out = dense.copy()
    for i in range(partition.num_blocks):
        sl = partition.block(i)
        blk = out[:, sl]
        smax = np.linalg.norm(blk, 2)
        if smax == 0.0:
            raise ValueError(f"block {i} is empty; raise density")
        out[:, sl] = blk * (targets[i] / smax)
    return out


def _design(rng, ell, n, partition, profile, density, correlation, bias):
    profile = np.asarray(profile, dtype=np.float64)
    if profile.shape != (partition.num_blocks,):
        raise ValueError("profile needs one entry per block")
    if np.any(~np.isfinite(profile)) or np.any(profile <= 0):
        raise ValueError("column-scale profile must be positive")
    z = rng.standard_normal((ell, n))
    if correlation > 0:
        shared = rng.standard_normal((ell, 1))
        z = math.sqrt(1.0 - correlation) * z + math.sqrt(correlation) * shared
    if density < 1.0:
        mask = rng.random((ell, n)) < density
        # keep every column nonempty
        empty = ~mask.any(axis=0)
        mask[rng.integers(ell, size=int(empty.sum())), np.flatnonzero(empty)] = True
        z = z * mask
    if bias:
        z[:, -1] = 1.0
    return _scale_blocks(z, partition, profile)


def synth_regression(
    seed: int,
    ell: int,
    n: int,
    block_size: int = 1,
    profile: Sequence[float] | None = None,
    *,
    density: float = 1.0,
    correlation: float = 0.0,
    support: float = 0.1,
    noise: float = 0.1,
    bias: bool = False,
    heavy_support: bool = False,
) -> tuple[Dataset, np.ndarray]:
    """Random regression data with prescribed block spectral norms.

    Returns the dataset and the planted sparse coefficient vector.
    ``profile[i]`` is the target spectral norm of column block ``i``, so for
    a loss with curvature bound ``kappa`` the block Lipschitz constant is
    ``kappa * profile[i]**2``. With ``bias=True`` the last column is all ones
    before block rescaling. With ``heavy_support=True`` the planted support
    is drawn with probability proportional to ``profile**2``, so large-norm
    columns tend to carry the signal.
    """
    partition = make_partition(n, block_size)
    if profile is None:
        profile = np.ones(partition.num_blocks)
    rng = make_rng(seed)
    dense = _design(rng, ell, n, partition, profile, density, correlation, bias)
    x_true = np.zeros(n)
    k = max(1, int(round(support * n)))
    if heavy_support:
        w = np.repeat(np.asarray(profile, dtype=np.float64) ** 2, partition.sizes)
        idx = np.sort(rng.choice(n, size=k, replace=False, p=w / w.sum()))
    else:
        idx = np.sort(rng.choice(n, size=k, replace=False))
    x_true[idx] = rng.standard_normal(k)
    b = dense @ x_true + noise * rng.standard_normal(ell)
    mat = BlockedSparseMatrix.from_dense(dense, partition)
    return Dataset(mat, b), x_true


def synth_classification(
    seed: int,
    ell: int,
    n: int,
    block_size: int = 5,
    profile: Sequence[float] | None = None,
    *,
    density: float = 1.0,
    correlation: float = 0.0,
    support: float = 0.2,
    flip: float = 0.05,
) -> tuple[Dataset, np.ndarray]:
    """Binary labels in {-1, +1} from a planted group-sparse separator."""
    partition = make_partition(n, block_size)
    if profile is None:
        profile = np.ones(partition.num_blocks)
    rng = make_rng(seed)
    dense = _design(rng, ell, n, partition, profile, density, correlation, False)
    w = np.zeros(n)
    nb = partition.num_blocks
    active = rng.choice(nb, size=max(1, int(round(support * nb))), replace=False)
    for i in active:
        sl = partition.block(i)
        w[sl] = rng.standard_normal(sl.stop - sl.start)
    margin = dense @ w
    b = np.where(margin >= 0, 1.0, -1.0)
    flips = rng.random(ell) < flip
    b[flips] = -b[flips]
    mat = BlockedSparseMatrix.from_dense(dense, partition)
    return Dataset(mat, b), w


def profile_for_ratio(num_blocks: int, ratio: float, heavy_fraction: float = 0.1) -> np.ndarray:
    """Block norm profile whose squared values have ``max / mean == ratio``.

    A ``heavy_fraction`` share of blocks (at least one) gets a large norm and
    the rest norm 1.
    """
    if ratio < 1:
        raise ValueError("ratio must be >= 1")
    k = max(1, int(round(heavy_fraction * num_blocks)))
    q = k / num_blocks
    if ratio * q >= 1:
        raise ValueError("ratio too large for the requested heavy fraction")
    heavy = ratio * (1 - q) / (1 - ratio * q)
    prof = np.ones(num_blocks)
    # spread heavy blocks evenly so contiguity does not matter
    idx = np.linspace(0, num_blocks - 1, k).round().astype(int)
    prof[idx] = math.sqrt(heavy)
    return prof


def warn_degenerate(i: int) -> None:
    warnings.warn(f"block {i} has an all-zero column block; using Lipschitz floor", RuntimeWarning, stacklevel=3)

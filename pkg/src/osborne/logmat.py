"""Sparse nonnegative matrices stored by the logarithms of their entries.

Zero entries are structurally absent, so every stored value is finite.
Both a row-major and a column-major index over the same entry set are built
at construction time; the Osborne kernel additionally uses off-diagonal
views of each, since diagonal entries never change under diagonal
similarity scaling.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np
from scipy.special import logsumexp


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _csr(keys: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Stable ordering of ``keys`` plus pointer array of length ``n + 1``."""
    order = np.argsort(keys, kind="stable")
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(keys, minlength=n), out=ptr[1:])
    return order, ptr


def segment_lse(z: np.ndarray, ptr: np.ndarray) -> np.ndarray:
    """Log-sum-exp of each segment ``z[ptr[i]:ptr[i+1]]``.

    Empty segments map to ``-inf``. The per-segment result depends only on
    the segment's own values, never on its neighbours, which keeps single
    and batched Osborne updates bit-identical.
    """
    counts = np.diff(ptr)
    out = np.full(counts.shape[0], -np.inf)
    nz = counts > 0
    if not nz.any():
        return out
    starts = ptr[:-1][nz]
    mx = np.maximum.reduceat(z, starts)
    s = np.add.reduceat(np.exp(z - np.repeat(mx, counts[nz])), starts)
    out[nz] = mx + np.log(s)
    return out


@dataclass(frozen=True)
class MatrixStats:
    """Conditioning statistics of a nonnegative matrix (all in log scale)."""

    m: int
    log_sum: float
    log_kmin: float
    log_kmax: float
    log_kappa: float

    @property
    def kappa(self) -> float:
        return float(np.exp(self.log_kappa))


@dataclass(frozen=True, eq=False)
class LogSparseMatrix:
    """An ``n x n`` nonnegative matrix held as ``(row, col, log K_ij)`` entries.

    Entries are kept sorted by ``(row, col)``. Use :func:`from_triplets` or
    :func:`from_log_triplets` rather than calling the constructor directly.
    """

    n: int
    rows: np.ndarray
    cols: np.ndarray
    logv: np.ndarray

    # derived indices, filled in __post_init__
    row_ptr: np.ndarray = field(init=False, repr=False)
    col_ptr: np.ndarray = field(init=False, repr=False)
    col_order: np.ndarray = field(init=False, repr=False)
    row_nnz: np.ndarray = field(init=False, repr=False)
    col_nnz: np.ndarray = field(init=False, repr=False)
    has_diag: np.ndarray = field(init=False, repr=False)
    diag_logv: np.ndarray = field(init=False, repr=False)
    # off-diagonal CSR (row k -> neighbour columns) and CSC (col k -> rows)
    ro_ptr: np.ndarray = field(init=False, repr=False)
    ro_nbr: np.ndarray = field(init=False, repr=False)
    ro_logv: np.ndarray = field(init=False, repr=False)
    ro_row: np.ndarray = field(init=False, repr=False)
    co_ptr: np.ndarray = field(init=False, repr=False)
    co_nbr: np.ndarray = field(init=False, repr=False)
    co_logv: np.ndarray = field(init=False, repr=False)
    co_perm: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        n = self.n
        if n < 1:
            raise ValueError(f"matrix dimension must be >= 1, got {n}")
        rows = np.asarray(self.rows, dtype=np.int64)
        cols = np.asarray(self.cols, dtype=np.int64)
        logv = np.asarray(self.logv, dtype=np.float64)
        if not (rows.shape == cols.shape == logv.shape and rows.ndim == 1):
            raise ValueError("rows, cols and logv must be 1-d arrays of equal length")
        if rows.size:
            if rows.min() < 0 or cols.min() < 0 or rows.max() >= n or cols.max() >= n:
                raise ValueError(f"entry index out of range for n={n}")
            if not np.all(np.isfinite(logv)):
                raise ValueError("log-values must be finite (zero entries are never stored)")
        order = np.lexsort((cols, rows))
        rows, cols, logv = rows[order], cols[order], logv[order]
        key = rows * n + cols
        dup = np.flatnonzero(key[1:] == key[:-1])
        if dup.size:
            i = dup[0]
            raise ValueError(f"duplicate entry ({rows[i]}, {cols[i]})")

        s = object.__setattr__
        s(self, "rows", _frozen(rows))
        s(self, "cols", _frozen(cols))
        s(self, "logv", _frozen(logv))
        row_nnz = np.bincount(rows, minlength=n)
        col_nnz = np.bincount(cols, minlength=n)
        row_ptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(row_nnz, out=row_ptr[1:])
        col_order, col_ptr = _csr(cols, n)
        s(self, "row_nnz", _frozen(row_nnz))
        s(self, "col_nnz", _frozen(col_nnz))
        s(self, "row_ptr", _frozen(row_ptr))
        s(self, "col_ptr", _frozen(col_ptr))
        s(self, "col_order", _frozen(col_order))

        dmask = rows == cols
        has_diag = np.zeros(n, dtype=bool)
        has_diag[rows[dmask]] = True
        diag_logv = np.zeros(n)
        diag_logv[rows[dmask]] = logv[dmask]
        s(self, "has_diag", _frozen(has_diag))
        s(self, "diag_logv", _frozen(diag_logv))

        off = ~dmask
        r_off, c_off, v_off = rows[off], cols[off], logv[off]
        ro_ptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(r_off, minlength=n), out=ro_ptr[1:])
        perm, co_ptr = _csr(c_off, n)
        s(self, "ro_ptr", _frozen(ro_ptr))
        s(self, "ro_nbr", _frozen(c_off))
        s(self, "ro_logv", _frozen(v_off))
        s(self, "ro_row", _frozen(r_off))
        s(self, "co_ptr", _frozen(co_ptr))
        s(self, "co_nbr", _frozen(r_off[perm]))
        s(self, "co_logv", _frozen(v_off[perm]))
        s(self, "co_perm", _frozen(perm))

    @property
    def m(self) -> int:
        return int(self.logv.size)

    @property
    def row_adjacency(self) -> list[np.ndarray]:
        """Entry ids of each row."""
        return [np.arange(self.row_ptr[i], self.row_ptr[i + 1]) for i in range(self.n)]

    @property
    def col_adjacency(self) -> list[np.ndarray]:
        """Entry ids of each column."""
        return [self.col_order[self.col_ptr[j]:self.col_ptr[j + 1]] for j in range(self.n)]

    def entries(self) -> Iterator[tuple[int, int, float]]:
        for i, j, v in zip(self.rows.tolist(), self.cols.tolist(), self.logv.tolist()):
            yield i, j, v

    def triplets(self) -> list[tuple[int, int, float]]:
        """Entries as ``(row, col, value)`` in the linear domain."""
        return [(i, j, float(np.exp(v))) for i, j, v in self.entries()]

    def to_dense(self) -> np.ndarray:
        A = np.zeros((self.n, self.n))
        A[self.rows, self.cols] = np.exp(self.logv)
        return A

    def with_logv(self, logv: np.ndarray) -> "LogSparseMatrix":
        """Same sparsity pattern with new log-values (entry order preserved)."""
        return LogSparseMatrix(self.n, self.rows, self.cols, np.asarray(logv, dtype=np.float64))

    def __repr__(self) -> str:
        return f"LogSparseMatrix(n={self.n}, m={self.m})"


def from_log_triplets(n: int, triplets: Iterable[tuple[int, int, float]]) -> LogSparseMatrix:
    """Build from ``(row, col, log K_ij)`` triplets."""
    t = list(triplets)
    if not t:
        z = np.zeros(0)
        return LogSparseMatrix(n, z.astype(np.int64), z.astype(np.int64), z)
    rows, cols, logv = zip(*t)
    return LogSparseMatrix(n, np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64),
                           np.array(logv, dtype=np.float64))


def from_triplets(n: int, triplets: Iterable[tuple[int, int, float]]) -> LogSparseMatrix:
    """Build from ``(row, col, value)`` triplets with strictly positive values.

    >>> M = from_triplets(2, [(0, 1, 4.0), (1, 0, 1.0)])
    >>> M.m
    2
    """
    t = list(triplets)
    for i, j, v in t:
        if not v > 0:
            raise ValueError(f"entry ({i}, {j}) has nonpositive value {v!r}")
    return from_log_triplets(n, ((i, j, float(np.log(v))) for i, j, v in t))


def from_dense(K: np.ndarray) -> LogSparseMatrix:
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError("expected a square matrix")
    if np.any(K < 0):
        raise ValueError("matrix must be nonnegative")
    r, c = np.nonzero(K)
    return LogSparseMatrix(K.shape[0], r, c, np.log(K[r, c]))


def stats(M: LogSparseMatrix) -> MatrixStats:
    if M.m == 0:
        raise ValueError("condition number is undefined for an empty matrix")
    log_sum = float(logsumexp(M.logv))
    log_kmin = float(M.logv.min())
    return MatrixStats(
        m=M.m,
        log_sum=log_sum,
        log_kmin=log_kmin,
        log_kmax=float(M.logv.max()),
        log_kappa=log_sum - log_kmin,
    )


def lp_preprocess(M: LogSparseMatrix, p: float) -> LogSparseMatrix:
    """Entrywise power ``K_ij ** p``, reducing l_p balancing to l_1 balancing."""
    if not np.isfinite(p) or p < 1:
        raise ValueError(f"p must be finite and >= 1, got {p!r}")
    if p == 1:
        return M
    return M.with_logv(M.logv * p)

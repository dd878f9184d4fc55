"""Block-sparse-row matrices and the kernels the LM loop needs.

Products are split into a symbolic phase (output pattern plus a
multiplication table) and a numeric phase that only gathers, multiplies
and reduces blocks. The table depends on input patterns only, so a fixed
Jacobian pattern pays for the symbolic phase once.

Accumulation always runs in ascending inner index, which keeps every kernel
bitwise reproducible.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.sparse as sp

from .errors import InvalidArgumentError

# Call counters for the symbolic phases; tests use them to prove cache reuse.
counters: Counter = Counter()

# Refuse to densify anything larger than this many scalars.
DENSE_LIMIT = 50_000_000

INDEX_DTYPE = np.int32
OFFSET_DTYPE = np.int64


@dataclass(frozen=True, eq=False)
class BsrMatrix:
    block_shape: tuple
    block_rows: int
    block_cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        br, bc = (int(v) for v in self.block_shape)
        object.__setattr__(self, "block_shape", (br, bc))
        row_ptr = np.asarray(self.row_ptr, dtype=OFFSET_DTYPE)
        col_idx = np.asarray(self.col_idx, dtype=INDEX_DTYPE)
        values = np.asarray(self.values, dtype=np.float64)
        if row_ptr.shape != (self.block_rows + 1,) or row_ptr[0] != 0:
            raise InvalidArgumentError("row_ptr must have block_rows + 1 entries starting at 0")
        if np.any(np.diff(row_ptr) < 0) or row_ptr[-1] != col_idx.size:
            raise InvalidArgumentError("row_ptr must be monotone and end at the number of blocks")
        if values.shape != (col_idx.size, br, bc):
            raise InvalidArgumentError(
                f"values must have shape {(col_idx.size, br, bc)}, got {values.shape}")
        if col_idx.size:
            if col_idx.min() < 0 or col_idx.max() >= self.block_cols:
                raise InvalidArgumentError("column index out of range")
            same_row = np.diff(_expand_rows(row_ptr)) == 0
            if np.any(np.diff(col_idx.astype(np.int64))[same_row] <= 0):
                raise InvalidArgumentError("column indices must be strictly increasing within a row")
        object.__setattr__(self, "row_ptr", row_ptr)
        object.__setattr__(self, "col_idx", col_idx)
        object.__setattr__(self, "values", values)

    @classmethod
    def _unchecked(cls, block_shape, block_rows, block_cols, row_ptr, col_idx, values):
        # Pattern already validated upstream; only values are new.
        obj = object.__new__(cls)
        for name, val in zip(("block_shape", "block_rows", "block_cols", "row_ptr", "col_idx", "values"),
                             (tuple(block_shape), block_rows, block_cols, row_ptr, col_idx, values)):
            object.__setattr__(obj, name, val)
        return obj

    @property
    def shape(self):
        return (self.block_rows * self.block_shape[0], self.block_cols * self.block_shape[1])

    @property
    def nnzb(self):
        return int(self.col_idx.size)

    def block_row_indices(self):
        return _expand_rows(self.row_ptr)

    def with_values(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise InvalidArgumentError(
                f"values shape {values.shape} does not match pattern {self.values.shape}")
        return BsrMatrix._unchecked(self.block_shape, self.block_rows, self.block_cols,
                                    self.row_ptr, self.col_idx, values)

    def same_pattern(self, other):
        return (
            self.block_shape == other.block_shape
            and self.block_rows == other.block_rows
            and self.block_cols == other.block_cols
            and np.array_equal(self.row_ptr, other.row_ptr)
            and np.array_equal(self.col_idx, other.col_idx)
        )

    def __matmul__(self, other):
        if isinstance(other, BsrMatrix):
            return spgemm_numeric(spgemm_symbolic(self, other), self, other)
        return spmv(self, other)

    @property
    def T(self):
        return transpose(self)


def _expand_rows(row_ptr):
    counts = np.diff(row_ptr)
    return np.repeat(np.arange(counts.size, dtype=OFFSET_DTYPE), counts)


def _segment_sum(values, starts):
    """Sum consecutive runs of ``values`` beginning at ``starts`` (all runs non-empty)."""
    if values.shape[0] == 0:
        return values[:0].copy()
    return np.add.reduceat(values, starts, axis=0)


def from_blocks(rows, cols, blocks, block_rows, block_cols):
    """Build a BSR matrix from unordered (row, col, block) triples; duplicates are summed."""
    rows = np.asarray(rows, dtype=np.int64).ravel()
    cols = np.asarray(cols, dtype=np.int64).ravel()
    blocks = np.asarray(blocks, dtype=np.float64)
    if blocks.ndim != 3 or blocks.shape[0] != rows.size or cols.size != rows.size:
        raise InvalidArgumentError("rows, cols and blocks must have matching leading length")
    if rows.size and (rows.min() < 0 or rows.max() >= block_rows
                      or cols.min() < 0 or cols.max() >= block_cols):
        raise InvalidArgumentError("block coordinates out of range")
    key = rows * block_cols + cols
    order = np.argsort(key, kind="stable")
    key = key[order]
    starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]]) if key.size else np.zeros(0, np.int64)
    values = _segment_sum(blocks[order], starts)
    ukey = key[starts]
    urow = ukey // block_cols if block_cols else ukey
    row_ptr = np.zeros(block_rows + 1, dtype=OFFSET_DTYPE)
    np.cumsum(np.bincount(urow, minlength=block_rows), out=row_ptr[1:])
    return BsrMatrix(blocks.shape[1:], block_rows, block_cols, row_ptr,
                     (ukey - urow * block_cols).astype(INDEX_DTYPE), values)


def from_dense(dense, block_shape, keep_zero_blocks=False):
    dense = np.asarray(dense, dtype=np.float64)
    br, bc = block_shape
    m, n = dense.shape
    if m % br or n % bc:
        raise InvalidArgumentError(f"dense shape {dense.shape} not divisible by block shape {block_shape}")
    tiles = dense.reshape(m // br, br, n // bc, bc).transpose(0, 2, 1, 3)
    if keep_zero_blocks:
        mask = np.ones(tiles.shape[:2], dtype=bool)
    else:
        mask = np.any(tiles != 0.0, axis=(2, 3))
    rows, cols = np.nonzero(mask)
    return from_blocks(rows, cols, tiles[rows, cols], m // br, n // bc)


def to_dense(a, limit=DENSE_LIMIT):
    m, n = a.shape
    if m * n > limit:
        raise InvalidArgumentError(f"refusing to densify {m}x{n} matrix (limit {limit} scalars)")
    br, bc = a.block_shape
    tiles = np.zeros((a.block_rows, a.block_cols, br, bc))
    tiles[a.block_row_indices(), a.col_idx] = a.values
    return tiles.transpose(0, 2, 1, 3).reshape(m, n)


@dataclass(frozen=True, eq=False)
class TransposePlan:
    """Pattern of the transpose and the permutation taking blocks there."""

    block_shape: tuple
    block_rows: int
    block_cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    perm: np.ndarray
    source_nnzb: int

    def apply(self, a):
        if a.nnzb != self.source_nnzb or a.block_shape != self.block_shape[::-1]:
            raise InvalidArgumentError("matrix pattern does not match transpose plan")
        return BsrMatrix._unchecked(self.block_shape, self.block_rows, self.block_cols, self.row_ptr,
                                    self.col_idx, np.ascontiguousarray(a.values[self.perm].transpose(0, 2, 1)))


def transpose_plan(a):
    counters["transpose_plan"] += 1
    perm = np.argsort(a.col_idx, kind="stable")
    row_ptr = np.zeros(a.block_cols + 1, dtype=OFFSET_DTYPE)
    np.cumsum(np.bincount(a.col_idx, minlength=a.block_cols), out=row_ptr[1:])
    return TransposePlan(a.block_shape[::-1], a.block_cols, a.block_rows, row_ptr,
                         a.block_row_indices()[perm].astype(INDEX_DTYPE), perm, a.nnzb)


def transpose(a):
    return transpose_plan(a).apply(a)


@dataclass(frozen=True, eq=False)
class SymbolicProduct:
    """Output pattern of ``A @ B`` plus the multiplication table.

    ``pair_a[p], pair_b[p]`` index blocks of A and B whose product lands in
    output block ``pair_out[p]``; pairs are sorted by output block and then by
    inner index, and ``seg_start`` marks where each output block's run begins.
    """

    block_shape: tuple
    block_rows: int
    block_cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    pair_a: np.ndarray
    pair_b: np.ndarray
    pair_out: np.ndarray
    seg_start: np.ndarray
    a_signature: tuple
    b_signature: tuple

    @property
    def nnzb(self):
        return int(self.col_idx.size)

    def pairs_for(self, block):
        lo = self.seg_start[block]
        hi = self.seg_start[block + 1] if block + 1 < self.seg_start.size else self.pair_a.size
        return list(zip(self.pair_a[lo:hi].tolist(), self.pair_b[lo:hi].tolist()))


def _signature(a):
    return (a.block_shape, a.block_rows, a.block_cols, a.nnzb)


def spgemm_symbolic(a, b):
    """Pattern-only phase of ``a @ b``; values are never read."""
    if a.block_cols != b.block_rows or a.block_shape[1] != b.block_shape[0]:
        raise InvalidArgumentError(
            f"cannot multiply {a.block_rows}x{a.block_cols} blocks of {a.block_shape} by "
            f"{b.block_rows}x{b.block_cols} blocks of {b.block_shape}")
    counters["spgemm_symbolic"] += 1
    a_rows = a.block_row_indices()
    b_start = b.row_ptr[a.col_idx]
    counts = b.row_ptr[a.col_idx.astype(np.int64) + 1] - b_start
    pair_a = np.repeat(np.arange(a.nnzb, dtype=np.int64), counts)
    run_start = np.repeat(np.cumsum(counts) - counts, counts)
    pair_b = np.repeat(b_start, counts) + (np.arange(pair_a.size) - run_start)
    out_row = a_rows[pair_a]
    key = out_row * b.block_cols + b.col_idx[pair_b]
    order = np.lexsort((a.col_idx[pair_a], key))
    key, pair_a, pair_b = key[order], pair_a[order], pair_b[order]
    first = np.r_[True, key[1:] != key[:-1]] if key.size else np.zeros(0, bool)
    seg_start = np.flatnonzero(first)
    pair_out = np.cumsum(first) - 1
    ukey = key[seg_start]
    urow = ukey // max(b.block_cols, 1)
    row_ptr = np.zeros(a.block_rows + 1, dtype=OFFSET_DTYPE)
    np.cumsum(np.bincount(urow, minlength=a.block_rows), out=row_ptr[1:])
    return SymbolicProduct(
        (a.block_shape[0], b.block_shape[1]), a.block_rows, b.block_cols, row_ptr,
        (ukey - urow * b.block_cols).astype(INDEX_DTYPE), pair_a, pair_b, pair_out,
        seg_start, _signature(a), _signature(b))


def spgemm_numeric(table, a, b, out=None):
    """Value phase of ``a @ b`` driven by a cached multiplication table.

    With ``out`` (a matrix of the product pattern) the result is written in
    place and ``out`` is returned.
    """
    if _signature(a) != table.a_signature or _signature(b) != table.b_signature:
        raise InvalidArgumentError("operand pattern differs from the one used in the symbolic phase")
    prods = np.matmul(a.values[table.pair_a], b.values[table.pair_b])
    values = _segment_sum(prods, table.seg_start)
    if out is not None:
        out.values[...] = values
        return out
    return BsrMatrix._unchecked(table.block_shape, table.block_rows, table.block_cols,
                                table.row_ptr, table.col_idx, values)


def spmv(a, x):
    x = np.asarray(x, dtype=np.float64)
    br, bc = a.block_shape
    if x.shape != (a.block_cols * bc,):
        raise InvalidArgumentError(f"vector length {x.shape} does not match {a.shape[1]} columns")
    y = np.zeros((a.block_rows, br))
    if a.nnzb:
        contrib = np.einsum("kij,kj->ki", a.values, x.reshape(-1, bc)[a.col_idx])
        nonempty = np.flatnonzero(np.diff(a.row_ptr) > 0)
        y[nonempty] = np.add.reduceat(contrib, a.row_ptr[nonempty], axis=0)
    return y.ravel()


def diagonal_block_index(a):
    """Index of the diagonal block of every block row."""
    br, bc = a.block_shape
    if br != bc or a.block_rows != a.block_cols:
        raise InvalidArgumentError("diagonal operations need a square matrix of square blocks")
    rows = a.block_row_indices()
    idx = np.flatnonzero(rows == a.col_idx)
    if idx.size != a.block_rows:
        present = np.zeros(a.block_rows, bool)
        present[rows[idx]] = True
        raise InvalidArgumentError(f"missing diagonal block in block row {int(np.argmin(present))}")
    return idx


def diagonal(a):
    idx = diagonal_block_index(a)
    return np.diagonal(a.values[idx], axis1=1, axis2=2).ravel().copy()


def _map_diagonal(a, fn):
    idx = diagonal_block_index(a)
    values = a.values.copy()
    k = np.arange(a.block_shape[0])
    values[idx[:, None], k, k] = fn(values[idx[:, None], k, k])
    return a.with_values(values)


def diag_scale_add(a, lam):
    """``A + lam * diag(A)``: every diagonal entry d becomes d * (1 + lam)."""
    return _map_diagonal(a, lambda d: d + lam * d)


def diag_clamp(a, lo, hi):
    if lo > hi:
        raise InvalidArgumentError(f"clamp range is empty: min {lo} > max {hi}")
    return _map_diagonal(a, lambda d: np.clip(d, lo, hi))


class CsrAssembly:
    """Cached scatter of a grid of BSR matrices into one scalar CSR matrix.

    ``grid`` maps (block_row_group, block_col_group) to a BSR matrix; the
    groups' scalar offsets are stacked in order. Built once per pattern,
    then :meth:`fill` only permutes values.
    """

    def __init__(self, grid, row_sizes, col_sizes):
        counters["csr_assembly"] += 1
        self.keys = sorted(grid)
        row_off = np.r_[0, np.cumsum(row_sizes)]
        col_off = np.r_[0, np.cumsum(col_sizes)]
        self.shape = (int(row_off[-1]), int(col_off[-1]))
        rows, cols = [], []
        self.signatures = {}
        for key in self.keys:
            m = grid[key]
            self.signatures[key] = _signature(m)
            br, bc = m.block_shape
            brow = m.block_row_indices()
            r = (brow[:, None, None] * br + np.arange(br)[None, :, None]
                 + np.zeros((1, 1, bc), np.int64)) + row_off[key[0]]
            c = (m.col_idx.astype(np.int64)[:, None, None] * bc + np.arange(bc)[None, None, :]
                 + np.zeros((1, br, 1), np.int64)) + col_off[key[1]]
            rows.append(r.ravel())
            cols.append(c.ravel())
        rows = np.concatenate(rows) if rows else np.zeros(0, np.int64)
        cols = np.concatenate(cols) if cols else np.zeros(0, np.int64)
        self.perm = np.lexsort((cols, rows))
        self.indices = cols[self.perm].astype(np.int32)
        self.indptr = np.zeros(self.shape[0] + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=self.shape[0]), out=self.indptr[1:])

    def fill(self, grid):
        parts = []
        for key in self.keys:
            if _signature(grid[key]) != self.signatures[key]:
                raise InvalidArgumentError(f"block {key} changed pattern since assembly was planned")
            parts.append(grid[key].values.ravel())
        data = np.concatenate(parts)[self.perm]
        return sp.csr_matrix((data, self.indices, self.indptr), shape=self.shape)


def to_csr(a):
    return CsrAssembly({(0, 0): a}, [a.shape[0]], [a.shape[1]]).fill({(0, 0): a})


def write_matrix_market(a, path):
    """Scalar-expanded coordinate dump for inspection in external tools."""
    scipy.io.mmwrite(str(path), to_csr(a).tocoo())

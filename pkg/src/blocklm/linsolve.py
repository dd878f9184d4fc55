"""Sparse SPD solvers for the damped normal equations.

Direct path: a fill-reducing ordering, elimination tree and the full
pattern of ``L`` are computed once from the matrix pattern
(:func:`cholesky_symbolic`); every later :func:`cholesky_solve` on a matrix
with the same pattern runs only the numeric up-looking factorisation and two
triangular solves.

Iterative path: conjugate gradients with a Jacobi (inverse diagonal)
preconditioner.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgumentError, NotSPDError, NumericalBreakdownError
from .sparse import BsrMatrix, counters, spmv, to_csr

DIRECT_TOL = 1e-10
PCG_TOL = 1e-8


@dataclass(frozen=True)
class SolveStats:
    iterations: int
    relative_residual: float
    converged: bool
    history: tuple = ()


def _as_csr(a):
    if isinstance(a, BsrMatrix):
        return to_csr(a)
    if sp.issparse(a):
        a = a.tocsr()
        a.sort_indices()
        return a
    return sp.csr_matrix(np.asarray(a, dtype=np.float64))


# -- ordering ----------------------------------------------------------------------


def minimum_degree_ordering(indptr, indices, n):
    """Greedy minimum-degree elimination order on a symmetric pattern.

    Degrees are exact in the elimination graph (no approximation, no
    supervariables); ties break on the lower index. Once the remaining graph
    is a clique its nodes are appended in index order.
    """
    adj = [set(indices[indptr[i]:indptr[i + 1]].tolist()) - {i} for i in range(n)]
    heap = [(len(a), i) for i, a in enumerate(adj)]
    heapq.heapify(heap)
    done = np.zeros(n, dtype=bool)
    order = []
    remaining = n
    while heap:
        deg, v = heapq.heappop(heap)
        if done[v] or deg != len(adj[v]):
            continue
        if deg >= remaining - 1:
            break
        done[v] = True
        order.append(v)
        remaining -= 1
        nbrs = adj[v]
        for u in nbrs:
            au = adj[u]
            au.discard(v)
            au |= nbrs
            au.discard(u)
            heapq.heappush(heap, (len(au), u))
        adj[v] = None
    order.extend(np.flatnonzero(~done).tolist())
    return np.asarray(order, dtype=np.int64)


def _block_ordering(a, block_sizes, method):
    sizes = np.asarray(block_sizes, dtype=np.int64)
    if sizes.sum() != a.shape[0]:
        raise InvalidArgumentError("block sizes do not add up to the matrix size")
    starts = np.r_[0, np.cumsum(sizes)]
    owner = np.repeat(np.arange(sizes.size), sizes)
    coo = a.tocoo()
    nb = sizes.size
    pattern = sp.csr_matrix((np.ones(coo.nnz), (owner[coo.row], owner[coo.col])), shape=(nb, nb))
    pattern.sum_duplicates()
    pattern.sort_indices()
    if method == "natural":
        border = np.arange(nb)
    else:
        border = minimum_degree_ordering(pattern.indptr, pattern.indices, nb)
    return np.concatenate([np.arange(starts[b], starts[b + 1]) for b in border]).astype(np.int64)


# -- symbolic factorisation ------------------------------------------------------------


@numba.njit(cache=True)
def _etree(n, cp, ci):
    parent = np.full(n, -1, np.int64)
    ancestor = np.full(n, -1, np.int64)
    for k in range(n):
        for p in range(cp[k], cp[k + 1]):
            i = ci[p]
            while i != -1 and i < k:
                inext = ancestor[i]
                ancestor[i] = k
                if inext == -1:
                    parent[i] = k
                i = inext
    return parent


@numba.njit(cache=True)
def _ereach(k, cp, ci, parent, mark, stack, out):
    """Pattern of row k of L in topological order, written to out[top:n]."""
    n = parent.size
    top = n
    mark[k] = k
    for p in range(cp[k], cp[k + 1]):
        i = ci[p]
        if i > k:
            continue
        length = 0
        while mark[i] != k:
            stack[length] = i
            length += 1
            mark[i] = k
            i = parent[i]
        while length > 0:
            length -= 1
            top -= 1
            out[top] = stack[length]
    return top


@numba.njit(cache=True)
def _symbolic(n, cp, ci, parent):
    mark = np.full(n, -1, np.int64)
    stack = np.empty(n, np.int64)
    out = np.empty(n, np.int64)
    colcount = np.ones(n, np.int64)
    rowcount = np.zeros(n, np.int64)
    for k in range(n):
        top = _ereach(k, cp, ci, parent, mark, stack, out)
        rowcount[k] = n - top
        for t in range(top, n):
            colcount[out[t]] += 1
    lp = np.zeros(n + 1, np.int64)
    rp = np.zeros(n + 1, np.int64)
    for k in range(n):
        lp[k + 1] = lp[k] + colcount[k]
        rp[k + 1] = rp[k] + rowcount[k]
    li = np.empty(lp[n], np.int64)
    rj = np.empty(rp[n], np.int64)
    rslot = np.empty(rp[n], np.int64)
    nxt = lp[:n].copy()
    mark[:] = -1
    for k in range(n):
        top = _ereach(k, cp, ci, parent, mark, stack, out)
        t0 = rp[k]
        for t in range(top, n):
            j = out[t]
            slot = nxt[j]
            nxt[j] += 1
            li[slot] = k
            rj[t0 + t - top] = j
            rslot[t0 + t - top] = slot
        li[nxt[k]] = k
        nxt[k] += 1
    return lp, li, rp, rj, rslot


@dataclass(frozen=True, eq=False)
class SymbolicFactor:
    """Pattern-only Cholesky analysis, reusable for any values on the same pattern.

    ``perm`` is the elimination order (row i of the permuted matrix is row
    ``perm[i]`` of A); ``l_indptr``/``l_indices`` give the column pattern of
    L with the diagonal first; ``parent`` is the elimination tree.
    """

    n: int
    perm: np.ndarray
    parent: np.ndarray
    l_indptr: np.ndarray
    l_indices: np.ndarray
    # numeric-phase plumbing
    _cp: np.ndarray
    _ci: np.ndarray
    _data_map: np.ndarray
    _rp: np.ndarray
    _rj: np.ndarray
    _rslot: np.ndarray
    _a_indptr: np.ndarray
    _a_indices: np.ndarray

    @property
    def nnz_l(self):
        return int(self.l_indices.size)

    def matches(self, a):
        return (a.shape == (self.n, self.n) and np.array_equal(a.indptr, self._a_indptr)
                and np.array_equal(a.indices, self._a_indices))


def cholesky_symbolic(a, ordering="amd", block_sizes=None):
    """Analyse the pattern of SPD matrix ``a``.

    ``ordering`` is ``"amd"`` (minimum degree) or ``"natural"``. With
    ``block_sizes`` the ordering is computed on the block graph and each
    block's scalars stay contiguous.
    """
    a = _as_csr(a)
    n = a.shape[0]
    if a.shape != (n, n):
        raise InvalidArgumentError(f"matrix must be square, got {a.shape}")
    if ordering not in ("amd", "natural"):
        raise InvalidArgumentError(f"unknown ordering {ordering!r}")
    counters["cholesky_symbolic"] += 1
    rows = np.repeat(np.arange(n), np.diff(a.indptr))
    has_diag = np.zeros(n, bool)
    has_diag[rows[rows == a.indices]] = True
    if not has_diag.all():
        raise InvalidArgumentError(f"structurally singular: no diagonal entry in row {int(np.argmin(has_diag))}")
    pattern_t = sp.csr_matrix((np.ones(a.nnz), a.indices, a.indptr), shape=a.shape).T.tocsr()
    pattern_t.sort_indices()
    if pattern_t.nnz != a.nnz or not np.array_equal(pattern_t.indices, a.indices):
        raise InvalidArgumentError("pattern is not structurally symmetric")
    if block_sizes is not None:
        perm = _block_ordering(a, block_sizes, ordering)
    elif ordering == "natural":
        perm = np.arange(n, dtype=np.int64)
    else:
        perm = minimum_degree_ordering(a.indptr, a.indices, n)
    iperm = np.empty(n, np.int64)
    iperm[perm] = np.arange(n)
    # Permuted upper triangle in CSC, remembering where each entry lives in a.data.
    prow, pcol = iperm[rows], iperm[a.indices]
    upper = prow <= pcol
    src = np.flatnonzero(upper)
    order = np.lexsort((prow[upper], pcol[upper]))
    src = src[order]
    ci = prow[src]
    cp = np.zeros(n + 1, np.int64)
    np.cumsum(np.bincount(pcol[src], minlength=n), out=cp[1:])
    parent = _etree(n, cp, ci)
    lp, li, rp, rj, rslot = _symbolic(n, cp, ci, parent)
    return SymbolicFactor(n, perm, parent, lp, li, cp, ci, src, rp, rj, rslot,
                          a.indptr.copy(), a.indices.copy())


# -- numeric factorisation ---------------------------------------------------------------


@numba.njit(cache=True)
def _numeric(n, cp, ci, cx, lp, li, rp, rj, rslot, lx):
    x = np.zeros(n)
    for k in range(n):
        for p in range(cp[k], cp[k + 1]):
            x[ci[p]] = cx[p]
        d = x[k]
        x[k] = 0.0
        for t in range(rp[k], rp[k + 1]):
            j = rj[t]
            lkj = x[j] / lx[lp[j]]
            x[j] = 0.0
            for p in range(lp[j] + 1, rslot[t]):
                x[li[p]] -= lx[p] * lkj
            d -= lkj * lkj
            lx[rslot[t]] = lkj
        if not d > 0.0:
            return k, d
        lx[lp[k]] = np.sqrt(d)
    return -1, 0.0


@numba.njit(cache=True)
def _triangular_solves(n, lp, li, lx, y):
    for j in range(n):
        y[j] /= lx[lp[j]]
        yj = y[j]
        for p in range(lp[j] + 1, lp[j + 1]):
            y[li[p]] -= lx[p] * yj
    for j in range(n - 1, -1, -1):
        s = y[j]
        for p in range(lp[j] + 1, lp[j + 1]):
            s -= lx[p] * y[li[p]]
        y[j] = s / lx[lp[j]]


class CholeskyFactor:
    """Numeric factor ``P A P^T = L L^T`` bound to a :class:`SymbolicFactor`."""

    def __init__(self, sym, a):
        a = _as_csr(a)
        if not sym.matches(a):
            raise InvalidArgumentError("matrix pattern differs from the symbolic analysis")
        self.sym = sym
        self.lx = np.empty(sym.nnz_l)
        cx = a.data[sym._data_map]
        bad, pivot = _numeric(sym.n, sym._cp, sym._ci, cx, sym.l_indptr, sym.l_indices,
                              sym._rp, sym._rj, sym._rslot, self.lx)
        if bad >= 0:
            raise NotSPDError(int(sym.perm[bad]), float(pivot))

    def solve(self, b):
        sym = self.sym
        y = np.ascontiguousarray(np.asarray(b, dtype=np.float64)[sym.perm])
        _triangular_solves(sym.n, sym.l_indptr, sym.l_indices, self.lx, y)
        x = np.empty(sym.n)
        x[sym.perm] = y
        return x

    def l_dense(self):
        sym = self.sym
        cols = np.repeat(np.arange(sym.n), np.diff(sym.l_indptr))
        out = np.zeros((sym.n, sym.n))
        out[sym.l_indices, cols] = self.lx
        return out


def cholesky_solve(sym, a, b, refine=True):
    """Solve ``a x = b`` with the cached analysis ``sym``.

    One step of iterative refinement is applied when the first solve misses
    the 1e-10 relative residual target.
    """
    a = _as_csr(a)
    b = np.asarray(b, dtype=np.float64)
    factor = CholeskyFactor(sym, a)
    x = factor.solve(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), SolveStats(0, 0.0, True)
    r = b - a @ x
    rel = np.linalg.norm(r) / bnorm
    if refine and rel > DIRECT_TOL:
        x = x + factor.solve(r)
        rel = np.linalg.norm(b - a @ x) / bnorm
    return x, SolveStats(0, float(rel), bool(rel <= DIRECT_TOL))


# -- iterative -----------------------------------------------------------------------------


def jacobi_preconditioner(a):
    if isinstance(a, BsrMatrix):
        from .sparse import diagonal
        d = diagonal(a)
    elif sp.issparse(a):
        d = a.diagonal()
    else:
        d = np.diagonal(np.asarray(a, dtype=np.float64))
    bad = np.flatnonzero(~(d > 0))
    if bad.size:
        raise InvalidArgumentError(
            f"Jacobi preconditioner needs a positive diagonal; entry {int(bad[0])} is {d[bad[0]]}")
    return 1.0 / d


def _matvec(a):
    if callable(a):
        return a
    if isinstance(a, BsrMatrix):
        return lambda v: spmv(a, v)
    if sp.issparse(a):
        a = a.tocsr()
        return lambda v: a @ v
    a = np.asarray(a, dtype=np.float64)
    return lambda v: a @ v


def pcg_solve(a, b, precond=None, tol=PCG_TOL, max_iters=None, x0=None):
    """Preconditioned conjugate gradients.

    ``precond`` is the inverse-diagonal vector from :func:`jacobi_preconditioner`
    (or None for plain CG). Stops when ``|b - A x| / |b| <= tol``.
    ``history`` records the relative residual after every iteration.
    """
    if not tol > 0:
        raise InvalidArgumentError("tol must be positive")
    b = np.asarray(b, dtype=np.float64)
    n = b.size
    if max_iters is None:
        max_iters = max(250, 2 * n)
    matvec = _matvec(a)
    m = np.ones(n) if precond is None else np.asarray(precond, dtype=np.float64)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), SolveStats(0, 0.0, True)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - matvec(x) if x0 is not None else b.copy()
    z = m * r
    p = z.copy()
    rz = r @ z
    rel = np.linalg.norm(r) / bnorm
    history = []
    it = 0
    while rel > tol and it < max_iters:
        ap = matvec(p)
        pap = p @ ap
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        z = m * r
        rz_new = r @ z
        it += 1
        rel = np.linalg.norm(r) / bnorm
        history.append(rel)
        if not (np.isfinite(rel) and np.isfinite(rz_new) and np.isfinite(alpha)):
            raise NumericalBreakdownError(f"PCG produced a non-finite value at iteration {it}")
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, SolveStats(it, float(rel), bool(rel <= tol), tuple(history))

"""Sparse Cholesky factorisation for SPD precision matrices.

SuperLU is run with a symmetric fill-reducing ordering and no pivoting, which
for an SPD matrix yields ``P Q P' = L D L'``.  The ordering is computed once
per sparsity pattern and cached, so re-factorising the same pattern with new
values (as a sampler does for every hyperparameter proposal) skips the
analysis step.  Marginal variances come from the Takahashi recursion on the
factor's pattern.
"""
from __future__ import annotations

import hashlib
from collections import OrderedDict

import numba
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = ["NotPositiveDefiniteError", "SparseCholesky", "fill_reducing_ordering"]


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """The matrix handed to the factorisation is not (numerically) SPD."""


_ORDERING_CACHE: OrderedDict[tuple, np.ndarray] = OrderedDict()
_CACHE_SIZE = 64


def _pattern_key(Q: sp.csc_matrix, trailing: tuple) -> tuple:
    h = hashlib.sha1()
    h.update(Q.indptr.tobytes())
    h.update(Q.indices.tobytes())
    return (Q.shape[0], h.hexdigest(), trailing)


def _splu_options():
    return dict(diag_pivot_thresh=0.0, options=dict(SymmetricMode=True))


def fill_reducing_ordering(Q, trailing=()) -> np.ndarray:
    """Minimum-degree ordering of Q's pattern, with ``trailing`` indices placed last.

    Dense rows (fixed effects, spatially-global weights) go last so that the
    factor stays sparse and their covariances land inside the factor pattern.
    """
    Q = sp.csc_matrix(Q)
    Q.sort_indices()
    trailing = tuple(int(i) for i in trailing)
    key = _pattern_key(Q, trailing)
    if key in _ORDERING_CACHE:
        _ORDERING_CACHE.move_to_end(key)
        return _ORDERING_CACHE[key]
    n = Q.shape[0]
    mask = np.ones(n, dtype=bool)
    mask[list(trailing)] = False
    head = np.flatnonzero(mask)
    if len(head) > 1:
        sub = Q[head][:, head].tocsc()
        # a diagonally dominant matrix with the same pattern factors without trouble
        pattern = sp.csc_matrix((np.ones_like(sub.data), sub.indices, sub.indptr), shape=sub.shape)
        pattern = pattern + pattern.T
        pattern = (pattern + sp.diags(np.asarray(abs(pattern).sum(axis=1)).ravel() + 1.0)).tocsc()
        lu = spla.splu(pattern, permc_spec="MMD_AT_PLUS_A", **_splu_options())
        # perm_c maps original column -> eliminated position
        head = head[np.argsort(lu.perm_c)]
    perm = np.concatenate([head, np.asarray(trailing, dtype=np.int64)]).astype(np.int64)
    perm.setflags(write=False)
    _ORDERING_CACHE[key] = perm
    if len(_ORDERING_CACHE) > _CACHE_SIZE:
        _ORDERING_CACHE.popitem(last=False)
    return perm


_PERMUTE_CACHE: OrderedDict[tuple, tuple] = OrderedDict()


_SYMBOLIC_CACHE: OrderedDict[tuple, tuple] = OrderedDict()


def _factor_pattern(Qp: sp.csc_matrix) -> tuple[np.ndarray, np.ndarray]:
    key = _pattern_key(Qp, ())
    hit = _SYMBOLIC_CACHE.get(key)
    if hit is None:
        hit = _symbolic(Qp.indptr.astype(np.int64), Qp.indices.astype(np.int64), Qp.shape[0])
        _SYMBOLIC_CACHE[key] = hit
        if len(_SYMBOLIC_CACHE) > _CACHE_SIZE:
            _SYMBOLIC_CACHE.popitem(last=False)
    else:
        _SYMBOLIC_CACHE.move_to_end(key)
    return hit


def _permuted(Q: sp.csc_matrix, trailing: tuple) -> tuple[np.ndarray, sp.csc_matrix]:
    """Ordering and the symmetrically permuted matrix; index work is cached per pattern."""
    key = _pattern_key(Q, trailing)
    hit = _PERMUTE_CACHE.get(key)
    if hit is None:
        perm = fill_reducing_ordering(Q, trailing)
        # permute a matrix of (1-based) positions to learn where every entry goes
        pos = sp.csc_matrix((np.arange(1.0, Q.nnz + 1.0), Q.indices, Q.indptr), shape=Q.shape)
        Pp = pos[perm][:, perm].tocsc()
        Pp.sort_indices()
        hit = (perm, Pp.data.astype(np.int64) - 1, Pp.indices, Pp.indptr)
        _PERMUTE_CACHE[key] = hit
        if len(_PERMUTE_CACHE) > _CACHE_SIZE:
            _PERMUTE_CACHE.popitem(last=False)
    else:
        _PERMUTE_CACHE.move_to_end(key)
    perm, where, indices, indptr = hit
    return perm, sp.csc_matrix((Q.data[where], indices, indptr), shape=Q.shape)


@numba.njit(cache=True)
def _symbolic(indptr, indices, n):
    """Column patterns of the Cholesky factor of a symmetric pattern (lower part, CSC).

    Column j holds the lower entries of A[:, j] merged with the patterns of its
    elimination-tree children.  The diagonal comes first in every column.
    """
    mark = np.full(n, -1, dtype=np.int64)
    head = np.full(n, -1, dtype=np.int64)
    nxt = np.full(n, -1, dtype=np.int64)
    buf = np.empty(n, dtype=np.int64)
    starts = np.zeros(n + 1, dtype=np.int64)
    store = np.empty(max(16, 4 * len(indices)), dtype=np.int64)
    used = 0
    for j in range(n):
        cnt = 0
        mark[j] = j
        for a in range(indptr[j], indptr[j + 1]):
            i = indices[a]
            if i > j and mark[i] != j:
                mark[i] = j
                buf[cnt] = i
                cnt += 1
        c = head[j]
        while c != -1:
            for a in range(starts[c] + 1, starts[c + 1]):
                i = store[a]
                if i > j and mark[i] != j:
                    mark[i] = j
                    buf[cnt] = i
                    cnt += 1
            c = nxt[c]
        rows = np.sort(buf[:cnt])
        if used + cnt + 1 > len(store):
            grown = np.empty(2 * (used + cnt + 1), dtype=np.int64)
            grown[:used] = store[:used]
            store = grown
        store[used] = j
        store[used + 1 : used + 1 + cnt] = rows
        used += cnt + 1
        starts[j + 1] = used
        if cnt > 0:
            p = rows[0]
            nxt[j] = head[p]
            head[p] = j
    return starts, store[:used].copy()


@numba.njit(cache=True)
def _find(indices, lo, hi, row):
    while lo < hi:
        mid = (lo + hi) // 2
        if indices[mid] < row:
            lo = mid + 1
        else:
            hi = mid
    return lo


@numba.njit(cache=True)
def _takahashi(indptr, indices, data):
    n = len(indptr) - 1
    S = np.zeros_like(data)
    for j in range(n - 1, -1, -1):
        start = indptr[j]
        end = indptr[j + 1]
        ljj = data[start]
        for a in range(start + 1, end):
            i = indices[a]
            s = 0.0
            for b in range(start + 1, end):
                k = indices[b]
                if i >= k:
                    col = k
                    row = i
                else:
                    col = i
                    row = k
                lo = indptr[col]
                hi = indptr[col + 1]
                pos = _find(indices, lo, hi, row)
                if pos == hi or indices[pos] != row:
                    return S, False
                s += data[b] * S[pos]
            S[a] = -s / ljj
        s = 0.0
        for b in range(start + 1, end):
            s += data[b] * S[b]
        S[start] = 1.0 / (ljj * ljj) - s / ljj
    return S, True


class SparseCholesky:
    """Factorisation ``Q[p][:, p] = L L'`` of a sparse SPD matrix.

    Parameters
    ----------
    Q : sparse matrix
        Symmetric positive definite.
    trailing : sequence of int, optional
        Indices forced to the end of the elimination order.
    """

    def __init__(self, Q, trailing=()):
        Q = sp.csc_matrix(Q, dtype=float)
        Q.sum_duplicates()
        Q.sort_indices()
        self.n = Q.shape[0]
        self.perm, Qp = _permuted(Q, tuple(int(i) for i in trailing))
        self.iperm = np.empty_like(self.perm)
        self.iperm[self.perm] = np.arange(self.n)
        try:
            lu = spla.splu(Qp, permc_spec="NATURAL", **_splu_options())
        except RuntimeError as exc:
            raise NotPositiveDefiniteError(f"factorisation failed: {exc}") from exc
        d = lu.U.diagonal()
        if (
            not np.all(np.isfinite(d))
            or np.any(d <= 0.0)
            or not np.array_equal(lu.perm_r, np.arange(self.n))
        ):
            raise NotPositiveDefiniteError("matrix is not positive definite")
        self._lu = lu
        self._d = d
        L = (lu.L @ sp.diags(np.sqrt(d))).tocoo()
        # SuperLU drops entries that cancel to zero; the selected inverse needs
        # the full symbolic pattern, so place the values onto it
        indptr, indices = _factor_pattern(Qp)
        keys = np.repeat(np.arange(self.n, dtype=np.int64), np.diff(indptr)) * self.n + indices
        pos = np.searchsorted(keys, L.col.astype(np.int64) * self.n + L.row)
        if np.any(pos >= len(keys)) or np.any(keys[np.minimum(pos, len(keys) - 1)] != L.col.astype(np.int64) * self.n + L.row):
            raise RuntimeError("numeric factor falls outside its symbolic pattern")
        data = np.zeros(len(indices))
        data[pos] = L.data
        self.L = sp.csc_matrix((data, indices, indptr), shape=(self.n, self.n))
        self._selinv = None
        self._pattern = None

    @property
    def nnz(self) -> int:
        return self.L.nnz

    def logdet(self) -> float:
        return float(np.sum(np.log(self._d)))

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        y = self._lu.solve(np.ascontiguousarray(b[self.perm]))
        return y[self.iperm]

    def solve_lt(self, z: np.ndarray) -> np.ndarray:
        """x = P' L^{-T} z, so x has covariance Q^{-1} when z is standard normal."""
        z = np.asarray(z, dtype=float)
        # Qp^{-1} L z = L^{-T} z
        y = self._lu.solve(np.ascontiguousarray(self.L @ z))
        return y[self.iperm]

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        if size is None:
            return self.solve_lt(rng.standard_normal(self.n))
        z = rng.standard_normal((self.n, size))
        return self.solve_lt(z).T

    def selected_inverse(self) -> sp.csc_matrix:
        """Entries of Q^{-1} on the (symmetrised) pattern of the factor, original ordering."""
        if self._selinv is None:
            L = self.L
            S, ok = _takahashi(L.indptr.astype(np.int64), L.indices.astype(np.int64), L.data)
            if not ok:
                raise RuntimeError("factor pattern is not closed; selected inverse unavailable")
            low = sp.csc_matrix((S, L.indices, L.indptr), shape=L.shape)
            full = (low + sp.triu(low.T, k=1)).tocsr()
            self._selinv = full[self.iperm][:, self.iperm].tocsc()
        return self._selinv

    def inverse_pattern(self) -> sp.csr_matrix:
        """Boolean pattern on which ``selected_inverse`` is exact, original ordering."""
        if self._pattern is None:
            L = self.L
            low = sp.csc_matrix((np.ones(L.nnz, dtype=bool), L.indices, L.indptr), shape=L.shape)
            full = (low + low.T).tocsr()
            self._pattern = full[self.iperm][:, self.iperm].astype(bool).tocsr()
        return self._pattern

    def marginal_variances(self) -> np.ndarray:
        return self.selected_inverse().diagonal().copy()

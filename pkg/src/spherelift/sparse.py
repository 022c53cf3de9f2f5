"""Fixed-support sparse kernels with per-sample (batched) values.

A :class:`Pattern` is the CSR structure of a 0/1 mask.  Operator values live
in a separate array of shape ``(..., nnz)`` so that data-dependent operators
(one set per batch item) share one structure.  Products with batched values
run on a padded fixed-width (ELL) copy of the structure; products with one
shared value vector use scipy's CSR kernel.  Row reductions use
``np.add.reduceat`` over sorted CSR segments.  All of these fix the
summation order.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True, eq=False)
class Pattern:
    shape: tuple[int, int]
    indptr: np.ndarray
    indices: np.ndarray
    rows: np.ndarray
    # values of the transpose, in transpose-CSR order, are values[..., t_perm]
    t_indptr: np.ndarray
    t_indices: np.ndarray
    t_perm: np.ndarray

    @classmethod
    def from_csr(cls, m: sp.spmatrix) -> "Pattern":
        m = sp.csr_matrix(m, copy=True)
        m.sum_duplicates()
        m.sort_indices()
        nnz = m.nnz
        tagged = sp.csr_matrix((np.arange(1, nnz + 1, dtype=np.float64), m.indices, m.indptr), shape=m.shape)
        t = tagged.T.tocsr()
        t.sort_indices()
        rows = np.repeat(np.arange(m.shape[0]), np.diff(m.indptr))
        return cls(
            shape=(int(m.shape[0]), int(m.shape[1])),
            indptr=m.indptr.astype(np.int64),
            indices=m.indices.astype(np.int64),
            rows=rows.astype(np.int64),
            t_indptr=t.indptr.astype(np.int64),
            t_indices=t.indices.astype(np.int64),
            t_perm=(t.data.astype(np.int64) - 1),
        )

    @cached_property
    def ell(self) -> tuple[np.ndarray, np.ndarray]:
        """Padded fixed-width layout: (column index, nnz position) per row slot.

        Padding slots point at column 0 and position ``nnz``, which addresses a
        zero appended to the values.
        """
        return _ell(self.indptr, self.indices)

    @cached_property
    def t_ell(self) -> tuple[np.ndarray, np.ndarray]:
        col, pos = _ell(self.t_indptr, self.t_indices)
        perm = np.append(self.t_perm, self.nnz)
        return col, perm[pos]

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def row_counts(self) -> np.ndarray:
        return np.diff(self.indptr)

    def transpose(self) -> "Pattern":
        inv = np.empty_like(self.t_perm)
        inv[self.t_perm] = np.arange(self.nnz)
        return Pattern(
            shape=(self.shape[1], self.shape[0]),
            indptr=self.t_indptr,
            indices=self.t_indices,
            rows=np.repeat(np.arange(self.shape[1]), np.diff(self.t_indptr)),
            t_indptr=self.indptr,
            t_indices=self.indices,
            t_perm=inv,
        )

    def to_dense(self, values: np.ndarray) -> np.ndarray:
        """Dense matrix (or stack of matrices) with ``values`` on the support."""
        values = np.asarray(values)
        out = np.zeros(values.shape[:-1] + self.shape, dtype=values.dtype)
        out[..., self.rows, self.indices] = values
        return out

    def mask(self) -> np.ndarray:
        return self.to_dense(np.ones(self.nnz))


def _segment_sum(x: np.ndarray, indptr: np.ndarray, axis: int) -> np.ndarray:
    axis = axis % x.ndim
    n_seg = len(indptr) - 1
    counts = np.diff(indptr)
    shape = list(x.shape)
    shape[axis] = n_seg
    out = np.zeros(shape, dtype=x.dtype)
    nonempty = counts > 0
    if not nonempty.any():
        return out
    summed = np.add.reduceat(x, indptr[:-1][nonempty], axis=axis)
    if nonempty.all():
        return summed
    idx = [slice(None)] * x.ndim
    idx[axis] = nonempty
    out[tuple(idx)] = summed
    return out


def _ell(indptr: np.ndarray, indices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    counts = np.diff(indptr)
    width = max(int(counts.max()) if len(counts) else 0, 1)
    slot = np.arange(width)[None, :]
    valid = slot < counts[:, None]
    pos = np.where(valid, indptr[:-1, None] + slot, len(indices))
    col = np.where(valid, np.append(indices, 0)[pos], 0)
    return col, pos


def _ell_product(col, pos, values, x):
    vals = np.concatenate([values, np.zeros(values.shape[:-1] + (1,), values.dtype)], axis=-1)[..., pos]
    # fixed slot order gives a deterministic summation order
    return np.einsum("...rwf,...rw->...rf", x[..., col, :], vals)


def _csr_product(indptr, indices, shape, values, x):
    # shared values: stream rows through scipy's CSR kernel, no gathered temporary
    m = sp.csr_matrix((values, indices, indptr), shape=shape)
    lead = x.shape[:-2]
    xt = np.moveaxis(x, -2, 0).reshape(x.shape[-2], -1)
    out = np.asarray(m @ xt).reshape((shape[0],) + lead + x.shape[-1:])
    return np.moveaxis(out, 0, -2)


def spmm(p: Pattern, values: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``S @ x`` where ``S`` has support ``p`` and entries ``values``.

    values: (..., nnz); x: (..., n_cols, f).  Leading dims broadcast.
    """
    if values.ndim == 1:
        return _csr_product(p.indptr, p.indices, p.shape, values, x)
    col, pos = p.ell
    return _ell_product(col, pos, values, x)


def spmm_t(p: Pattern, values: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``S.T @ y`` using the transpose structure (no densification)."""
    if values.ndim == 1:
        return _csr_product(p.t_indptr, p.t_indices, p.shape[::-1], values[p.t_perm], y)
    col, pos = p.t_ell
    return _ell_product(col, pos, values, y)


def spmm_value_grad(p: Pattern, g_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    """d(sum g_out * (S @ x)) / d values, restricted to the support."""
    return np.einsum("...kf,...kf->...k", g_out[..., p.rows, :], x[..., p.indices, :])


def row_sum(p: Pattern, values: np.ndarray) -> np.ndarray:
    return _segment_sum(values, p.indptr, axis=-1)


def row_softmax(p: Pattern, scores: np.ndarray) -> np.ndarray:
    """Softmax over each row's support; entries outside the support are implicitly 0."""
    counts = p.row_counts()
    if np.any(counts == 0):
        raise ValueError("row softmax over an empty row support")
    row_max = np.maximum.reduceat(scores, p.indptr[:-1], axis=-1)
    e = np.exp(scores - row_max[..., p.rows])
    return e / np.add.reduceat(e, p.indptr[:-1], axis=-1)[..., p.rows]


def row_softmax_grad(p: Pattern, y: np.ndarray, g: np.ndarray) -> np.ndarray:
    inner = _segment_sum(g * y, p.indptr, axis=-1)
    return y * (g - inner[..., p.rows])

"""Update-first lifting on one level of the icosphere hierarchy.

Forward (analysis)::

    C = X_e + U @ X_o
    D = X_o - P @ C

Backward (synthesis) reverses the steps::

    X_o = D + P @ C
    X_e = C - U @ X_o

``U`` lives on the support of the even->odd block ``M`` and ``P`` on the
odd->even block ``N``.  With row sums 1 (``U``) and 1/2 (``P``) a constant
signal ``c`` gives ``C = 2c`` and ``D = 0``.

Operator values may carry leading batch axes (one operator set per sample)
as long as they broadcast against the signal's leading axes.

The same code runs on any bipartite even/odd support (small toy graphs in
tests, say); results are wrapped in :class:`SphericalSignal` only when the
node counts are those of an icosphere level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sparse
from .icosphere import BlockAdjacency
from .sparse import Pattern


@dataclass(frozen=True, eq=False)
class LiftingOperators:
    level: int
    update_pattern: Pattern
    predict_pattern: Pattern
    update_values: np.ndarray  # (..., nnz(M))
    predict_values: np.ndarray  # (..., nnz(N))

    @property
    def n_even(self) -> int:
        return self.update_pattern.shape[0]

    @property
    def n_odd(self) -> int:
        return self.update_pattern.shape[1]

    @property
    def U_hat(self) -> np.ndarray:
        return self.update_pattern.to_dense(self.update_values)

    @property
    def P_hat(self) -> np.ndarray:
        return self.predict_pattern.to_dense(self.predict_values)

    def row_sums(self) -> tuple[np.ndarray, np.ndarray]:
        return (sparse.row_sum(self.update_pattern, self.update_values),
                sparse.row_sum(self.predict_pattern, self.predict_values))

    def check(self, tol: float = 1e-9) -> list[str]:
        """Return a list of violated invariants (empty when valid)."""
        problems = []
        for name, v in (("update", self.update_values), ("predict", self.predict_values)):
            if not np.all(np.isfinite(v)):
                problems.append(f"{name} values not finite")
            elif np.any(v < 0):
                problems.append(f"{name} values negative")
        su, sp_ = self.row_sums()
        if np.any(np.abs(su - 1.0) > tol):
            i = int(np.flatnonzero((np.abs(su - 1.0) > tol).reshape(-1, su.shape[-1]).any(0))[0])
            problems.append(f"update row {i} sums to {su[..., i].ravel()[0]!r}, expected 1")
        if np.any(np.abs(sp_ - 0.5) > tol):
            i = int(np.flatnonzero((np.abs(sp_ - 0.5) > tol).reshape(-1, sp_.shape[-1]).any(0))[0])
            problems.append(f"predict row {i} sums to {sp_[..., i].ravel()[0]!r}, expected 0.5")
        return problems

    def with_values(self, update_values=None, predict_values=None) -> "LiftingOperators":
        return LiftingOperators(
            self.level, self.update_pattern, self.predict_pattern,
            self.update_values if update_values is None else np.asarray(update_values),
            self.predict_values if predict_values is None else np.asarray(predict_values),
        )


@dataclass(frozen=True)
class SphericalSignal:
    level: int
    values: np.ndarray  # (..., nodes, channels)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim < 2:
            raise ValueError("signal values must be at least 2-D (nodes, channels)")
        expected = 10 * 4**self.level + 2
        if v.shape[-2] != expected:
            raise ValueError(f"level {self.level} signal needs {expected} rows, got {v.shape[-2]}")
        if not np.all(np.isfinite(v)):
            raise ValueError("signal contains nonfinite values")
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[-1]


@dataclass(frozen=True)
class SubbandPair:
    C: np.ndarray  # approximation, (..., n_even, f)
    D: np.ndarray  # detail, (..., n_odd, f)


def handcrafted_operators(adj: BlockAdjacency) -> LiftingOperators:
    """Uniform update weights (1/deg per even row) and predict weights 1/4."""
    up, pp = adj.update_pattern, adj.predict_pattern
    cu, cp = up.row_counts(), pp.row_counts()
    if np.any(cu == 0) or np.any(cp == 0):
        raise ValueError(f"level {adj.level}: block adjacency has a row without neighbors")
    u = (1.0 / cu)[up.rows]
    p = (0.5 / cp)[pp.rows]
    return LiftingOperators(adj.level, up, pp, u, p)


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, SphericalSignal) else np.asarray(x)


def _is_icosphere_level(level: int, n_even: int, n_odd: int) -> bool:
    return level >= 1 and n_even == 10 * 4 ** (level - 1) + 2 and n_even + n_odd == 10 * 4**level + 2


def _wrap(level: int, values: np.ndarray, n_even: int, n_odd: int):
    return SphericalSignal(level, values) if _is_icosphere_level(level, n_even, n_odd) else values


def _check_shapes(ops: LiftingOperators, n_even: int, n_odd: int) -> None:
    if n_even != ops.n_even or n_odd != ops.n_odd:
        raise ValueError(
            f"shape mismatch: got {n_even} even / {n_odd} odd rows, operators at level "
            f"{ops.level} expect {ops.n_even} / {ops.n_odd}")


def lift_forward(x, ops: LiftingOperators) -> SubbandPair:
    if isinstance(x, SphericalSignal) and x.level != ops.level:
        raise ValueError(f"signal level {x.level} != operator level {ops.level}")
    xv = _values(x)
    ne = ops.n_even
    _check_shapes(ops, ne, xv.shape[-2] - ne)
    xe, xo = xv[..., :ne, :], xv[..., ne:, :]
    # accumulate into the fresh product arrays to avoid extra temporaries
    dt = np.result_type(xv, ops.update_values, ops.predict_values)
    c = sparse.spmm(ops.update_pattern, ops.update_values, xo).astype(dt, copy=False)
    c += xe
    d = sparse.spmm(ops.predict_pattern, ops.predict_values, c).astype(dt, copy=False)
    np.subtract(xo, d, out=d)
    return SubbandPair(c, d)


def lift_backward(sub: SubbandPair, ops: LiftingOperators) -> SphericalSignal | np.ndarray:
    c, d = np.asarray(sub.C), np.asarray(sub.D)
    _check_shapes(ops, c.shape[-2], d.shape[-2])
    xo = d + sparse.spmm(ops.predict_pattern, ops.predict_values, c)
    xe = c - sparse.spmm(ops.update_pattern, ops.update_values, xo)
    return _wrap(ops.level, np.concatenate([xe, xo], axis=-2), ops.n_even, ops.n_odd)


def lift_pool(x, ops: LiftingOperators) -> tuple[SphericalSignal | np.ndarray, np.ndarray]:
    """Keep the approximation as the coarse signal; hand back the detail for the loss."""
    sub = lift_forward(x, ops)
    if _is_icosphere_level(ops.level, ops.n_even, ops.n_odd):
        return SphericalSignal(ops.level - 1, sub.C), sub.D
    return sub.C, sub.D


def lift_unpool(c, ops: LiftingOperators) -> SphericalSignal | np.ndarray:
    cv = _values(c)
    if isinstance(c, SphericalSignal) and c.level != ops.level - 1:
        raise ValueError(f"coarse signal level {c.level} != {ops.level - 1}")
    d = np.zeros(cv.shape[:-2] + (ops.n_odd, cv.shape[-1]), dtype=cv.dtype)
    return lift_backward(SubbandPair(cv, d), ops)


POOL_KINDS = ("downsample", "mean", "max")


def baseline_pool(x, adj: BlockAdjacency, kind: str) -> SphericalSignal | np.ndarray:
    """Non-lifting pooling: keep even rows, or aggregate each even node with its odd neighbors."""
    xv = _values(x)
    ne, no = adj.n_even, adj.n_odd
    if xv.shape[-2] != ne + no:
        raise ValueError(f"expected {ne + no} rows at level {adj.level}, got {xv.shape[-2]}")
    xe, xo = xv[..., :ne, :], xv[..., ne:, :]
    pat = adj.update_pattern
    if kind == "downsample":
        out = xe.copy()
    elif kind == "mean":
        s = sparse.spmm(pat, np.ones(pat.nnz, dtype=xv.dtype), xo)
        out = (xe + s) / (1.0 + pat.row_counts())[:, None]
    elif kind == "max":
        out = np.maximum(xe, np.maximum.reduceat(xo[..., pat.indices, :], pat.indptr[:-1], axis=-2))
    else:
        raise ValueError(f"unknown pooling kind {kind!r}; expected one of {POOL_KINDS}")
    if _is_icosphere_level(adj.level, ne, no):
        return SphericalSignal(adj.level - 1, out)
    return out


def baseline_unpool(c, adj: BlockAdjacency, kind: str = "zero_pad") -> SphericalSignal | np.ndarray:
    if kind != "zero_pad":
        raise ValueError(f"unknown unpooling kind {kind!r}")
    cv = _values(c)
    if cv.shape[-2] != adj.n_even:
        raise ValueError(f"expected {adj.n_even} coarse rows, got {cv.shape[-2]}")
    pad = np.zeros(cv.shape[:-2] + (adj.n_odd, cv.shape[-1]), dtype=cv.dtype)
    return _wrap(adj.level, np.concatenate([cv, pad], axis=-2), adj.n_even, adj.n_odd)

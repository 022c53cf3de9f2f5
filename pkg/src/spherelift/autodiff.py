"""Tape-based reverse-mode differentiation over a small primitive set.

Every primitive records its output value and a closure mapping the output
adjoint to input adjoints.  Leaves are created with :meth:`Tape.param`
(differentiable, named) or :meth:`Tape.const`.  Masks and mesh structure are
always constants.

Example::

    tape = Tape()
    w = tape.param("w", np.ones((3, 2)))
    loss = sqnorm(matmul(tape.const(x), w))
    grads = tape.backward(loss)
    grads["w"]
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import sparse
from .sparse import Pattern


class Var:
    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.value.shape})"


class Tape:
    """Recorded computation graph.  Nodes are appended in evaluation order, so
    the list is topologically sorted by construction."""

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.parents: list[tuple[int, ...]] = []
        self.backward_fns: list[Callable | None] = []
        self.ops: list[str] = []
        self.requires_grad: list[bool] = []
        self.params: dict[str, int] = {}

    def __len__(self):
        return len(self.values)

    def _push(self, op: str, value: np.ndarray, parents=(), backward_fn=None) -> Var:
        value = np.asarray(value)
        if not np.all(np.isfinite(value)):
            raise FloatingPointError(f"nonfinite value produced by {op}")
        self.values.append(value)
        self.parents.append(tuple(p.index for p in parents))
        req = op == "param" or any(self.requires_grad[p.index] for p in parents)
        self.backward_fns.append(backward_fn if req else None)
        self.requires_grad.append(req)
        self.ops.append(op)
        return Var(self, len(self.values) - 1, value)

    def param(self, name: str, value) -> Var:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        v = self._push("param", np.asarray(value))
        self.params[name] = v.index
        return v

    def const(self, value) -> Var:
        return self._push("const", np.asarray(value))

    def backward(self, output: Var, seed=None) -> dict[str, np.ndarray]:
        """Propagate adjoints from ``output``; return gradients of named params."""
        if output.tape is not self:
            raise ValueError("output belongs to a different tape")
        if seed is None:
            if output.value.size != 1:
                raise ValueError(f"backward needs a scalar output or explicit seed, got shape {output.value.shape}")
            seed = np.ones_like(output.value)
        seed = np.asarray(seed, dtype=output.value.dtype)
        if seed.shape != output.value.shape:
            raise ValueError(f"seed shape {seed.shape} != output shape {output.value.shape}")
        adj: list[np.ndarray | None] = [None] * len(self.values)
        adj[output.index] = seed
        for i in range(output.index, -1, -1):
            g = adj[i]
            fn = self.backward_fns[i]
            if g is None or fn is None:
                continue
            grads = fn(g)
            for p, gp in zip(self.parents[i], grads):
                if gp is None or not self.requires_grad[p]:
                    continue
                assert gp.shape == self.values[p].shape, (self.ops[i], gp.shape, self.values[p].shape)
                adj[p] = gp if adj[p] is None else adj[p] + gp
        return {
            name: (adj[i] if adj[i] is not None else np.zeros_like(self.values[i]))
            for name, i in self.params.items()
        }


def forward_record(program: Callable, inputs: dict, params: dict | None = None):
    """Run ``program(tape, **vars)`` on a fresh tape.

    ``inputs`` become constants and ``params`` differentiable leaves.
    Returns ``(outputs, tape)``.
    """
    tape = Tape()
    kw = {k: tape.const(v) for k, v in inputs.items()}
    for k, v in (params or {}).items():
        kw[k] = tape.param(k, v)
    return program(tape, **kw), tape


def backward(tape: Tape, output: Var, seed=None) -> dict[str, np.ndarray]:
    return tape.backward(output, seed)


# --------------------------------------------------------------------------
# helpers


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one argument must be a Var")


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("mixing variables from different tapes")
        return x
    return tape.const(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    sa, sb = a.shape, b.shape
    return t._push("add", a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    sa, sb = a.shape, b.shape
    return t._push("sub", a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    av, bv = a.value, b.value
    return t._push("mul", av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Var, c: float) -> Var:
    return a.tape._push("scale", a.value * c, (a,), lambda g: (g * c,))


def leaky_relu(a: Var, alpha: float = 0.2) -> Var:
    pos = a.value > 0
    slope = np.where(pos, 1.0, alpha).astype(a.value.dtype)
    return a.tape._push("leaky_relu", a.value * slope, (a,), lambda g: (g * slope,))


def relu(a: Var) -> Var:
    pos = a.value > 0
    return a.tape._push("relu", np.where(pos, a.value, 0.0).astype(a.value.dtype), (a,),
                        lambda g: (np.where(pos, g, 0.0).astype(g.dtype),))


def sqrt(a: Var) -> Var:
    """Square root with a zero subgradient at 0 (used for norms)."""
    if np.any(a.value < 0):
        raise FloatingPointError("sqrt of a negative value")
    y = np.sqrt(a.value)
    safe = np.where(y > 0, y, 1.0)

    def bw(g):
        return (np.where(y > 0, g / (2.0 * safe), 0.0).astype(g.dtype),)

    return a.tape._push("sqrt", y, (a,), bw)


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Var:
    """Dense product over the last two axes with broadcasting of leading axes."""
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    av, bv = a.value, b.value

    def bw(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return t._push("matmul", av @ bv, (a, b), bw)


def spmm(p: Pattern, values, x) -> Var:
    """Sparse-masked product ``S @ x``; the value adjoint stays on the support."""
    t = _tape_of(values, x)
    values, x = _lift(t, values), _lift(t, x)
    vv, xv = values.value, x.value
    need_v, need_x = t.requires_grad[values.index], t.requires_grad[x.index]

    def bw(g):
        gv = _unbroadcast(sparse.spmm_value_grad(p, g, xv), vv.shape) if need_v else None
        gx = _unbroadcast(sparse.spmm_t(p, vv, g), xv.shape) if need_x else None
        return gv, gx

    return t._push("spmm", sparse.spmm(p, vv, xv), (values, x), bw)


def row_softmax(p: Pattern, scores: Var) -> Var:
    y = sparse.row_softmax(p, scores.value)
    return scores.tape._push("row_softmax", y, (scores,),
                             lambda g: (sparse.row_softmax_grad(p, y, g),))


# --------------------------------------------------------------------------
# indexing / shape


def take(a: Var, idx: np.ndarray, axis: int) -> Var:
    """Gather along ``axis``; adjoint scatters back with accumulation."""
    idx = np.asarray(idx)
    shape = a.shape
    ax = axis % len(shape)

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        moved_out = np.moveaxis(out, ax, 0)
        np.add.at(moved_out, idx, np.moveaxis(g, ax, 0))
        return (out,)

    return a.tape._push("take", np.take(a.value, idx, axis=ax), (a,), bw)


def split_nodes(a: Var, n_first: int) -> tuple[Var, Var]:
    """Split along the node axis (-2) into the first ``n_first`` rows and the rest."""
    n = a.shape[-2]
    return slice_nodes(a, 0, n_first), slice_nodes(a, n_first, n)


def slice_nodes(a: Var, start: int, stop: int) -> Var:
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[..., start:stop, :] = g
        return (out,)

    return a.tape._push("slice", a.value[..., start:stop, :], (a,), bw)


def concat_nodes(a: Var, b: Var) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    na = a.shape[-2]
    return t._push("concat", np.concatenate([a.value, b.value], axis=-2), (a, b),
                   lambda g: (g[..., :na, :], g[..., na:, :]))


def reshape(a: Var, shape) -> Var:
    old = a.shape
    return a.tape._push("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


# --------------------------------------------------------------------------
# reductions


def sum_(a: Var, axis=None, keepdims: bool = False) -> Var:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape._push("sum", np.sum(a.value, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Var, axis=None, keepdims: bool = False) -> Var:
    shape = a.shape
    count = a.value.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return a.tape._push("mean", np.mean(a.value, axis=axis, keepdims=keepdims), (a,), bw)


def sqnorm(a: Var, axis=None) -> Var:
    """Sum of squares (over all axes, or the given axes)."""
    av = a.value

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (2.0 * g * av,)

    return a.tape._push("sqnorm", np.sum(av * av, axis=axis), (a,), bw)


def norm(a: Var, axis=None) -> Var:
    return sqrt(sqnorm(a, axis=axis))


def cross_entropy(logits: Var, labels: np.ndarray) -> Var:
    """Mean softmax cross-entropy of (B, K) logits against integer labels."""
    z = logits.value
    labels = np.asarray(labels, dtype=np.int64)
    b = z.shape[0]
    shifted = z - z.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logsum
    loss = -logp[np.arange(b), labels].mean()

    def bw(g):
        probs = np.exp(logp)
        probs[np.arange(b), labels] -= 1.0
        return (g * probs / b,)

    return logits.tape._push("cross_entropy", np.asarray(loss, dtype=z.dtype), (logits,), bw)

"""Executable wavelet properties, run as a battery by ``spherelift check``.

Each check returns a :class:`PropertyResult` carrying the worst measured
value and, on failure, the first counterexample found.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .attention import AttentionParams, compute_operators
from .icosphere import IcosphereHierarchy, build_hierarchy, validate_hierarchy
from .lifting import LiftingOperators, handcrafted_operators, lift_backward, lift_forward, lift_unpool
from .model import Network, NetworkConfig, init_params

INVERT_TOL = 1e-10
MOMENT_TOL = 1e-9
IDEMPOTENCE_TOL = 1e-10
ROW_SUM_TOL = 1e-9
GRAD_TOL = 1e-4
# gradient entries below this size are compared in absolute terms; central
# differences with step 1e-6 resolve a unit-scale loss to about 1e-10
GRAD_FLOOR = 1e-5


@dataclass
class PropertyResult:
    name: str
    level: int | None
    passed: bool
    value: float
    tol: float
    counterexample: str = ""

    def line(self) -> str:
        lvl = "-" if self.level is None else str(self.level)
        status = "PASS" if self.passed else "FAIL"
        msg = f"{status}  {self.name:<24} level {lvl:>2}  value {self.value:.3e}  tol {self.tol:.0e}"
        return msg + (f"  first counterexample: {self.counterexample}" if self.counterexample else "")


def _first_bad(err: np.ndarray, tol: float, level: int, what: str) -> str:
    """Describe the first entry of ``err`` (shape (..., nodes, channels)) exceeding ``tol``."""
    idx = np.argwhere(err > tol)
    if len(idx) == 0:
        return ""
    *lead, node, ch = idx[0]
    where = f"sample {lead[0]}, " if lead else ""
    return f"{where}{what} node {node}, channel {ch}: {err[tuple(idx[0])]:.3e}"


def check_invertibility(ops: LiftingOperators, rng: np.random.Generator, channels: int = 8,
                        tol: float = INVERT_TOL) -> PropertyResult:
    """Backward of forward reproduces random signals, relative max error."""
    n = ops.n_even + ops.n_odd
    batch = ops.update_values.shape[:-1]
    x = rng.normal(size=batch + (n, channels))
    back = lift_backward(lift_forward(x, ops), ops).values
    err = np.abs(back - x) / np.abs(x).max()
    worst = float(err.max())
    return PropertyResult("invertibility", ops.level, worst <= tol, worst, tol,
                          _first_bad(err, tol, ops.level, "signal"))


def check_vanishing_moment(ops: LiftingOperators, value: float = 1.0, channels: int = 2,
                           tol: float = MOMENT_TOL) -> PropertyResult:
    """Constant input must give zero detail coefficients."""
    n = ops.n_even + ops.n_odd
    batch = ops.update_values.shape[:-1]
    d = lift_forward(np.full(batch + (n, channels), value), ops).D
    err = np.abs(d)
    worst = float(err.max())
    return PropertyResult("vanishing_moment", ops.level, worst <= tol, worst, tol,
                          _first_bad(err, tol, ops.level, "odd") + (f" (||D||inf = {worst:.3e})" if worst > tol else ""))


def check_idempotence(ops: LiftingOperators, rng: np.random.Generator, channels: int = 4,
                      tol: float = IDEMPOTENCE_TOL) -> PropertyResult:
    """Pooling the unpooled approximation returns it with zero detail."""
    batch = ops.update_values.shape[:-1]
    c = rng.normal(size=batch + (ops.n_even, channels))
    sub = lift_forward(lift_unpool(c, ops), ops)
    scale = np.abs(c).max()
    err_c = np.abs(sub.C - c) / scale
    err_d = np.abs(sub.D) / scale
    worst = float(max(err_c.max(), err_d.max()))
    cx = _first_bad(err_c, tol, ops.level, "even") or _first_bad(err_d, tol, ops.level, "odd (detail)")
    return PropertyResult("idempotence", ops.level, worst <= tol, worst, tol, cx)


def impulse_support(ops: LiftingOperators, source: int) -> np.ndarray:
    """Graph nodes whose coefficient (C on even, D on odd) responds to an impulse at ``source``."""
    n = ops.n_even + ops.n_odd
    x = np.zeros((n, 1))
    x[source] = 1.0
    sub = lift_forward(x, ops)
    resp = np.concatenate([sub.C[:, 0], sub.D[:, 0]])
    return np.flatnonzero(resp != 0.0)


def check_locality(h: IcosphereHierarchy, ops: LiftingOperators, rng: np.random.Generator,
                   n_impulses: int = 50, max_hops: int = 2) -> PropertyResult:
    """Every impulse response stays within ``max_hops`` graph hops of the impulse."""
    if ops.update_values.ndim != 1:
        raise ValueError("locality is checked on a single (unbatched) operator set")
    n = ops.n_even + ops.n_odd
    sources = rng.choice(n, size=min(n_impulses, n), replace=False)
    worst = 0
    cx = ""
    for s in sources:
        dist = h.hops(ops.level, int(s), max_hops + 2)
        far = dist[impulse_support(ops, int(s))]
        worst = max(worst, int(far.max()))
        if not cx and far.max() > max_hops:
            node = int(impulse_support(ops, int(s))[np.argmax(far)])
            cx = f"impulse at node {s} reaches node {node} ({int(far.max())} hops)"
    return PropertyResult("locality", ops.level, worst <= max_hops, float(worst), float(max_hops), cx)


def check_row_sums(ops: LiftingOperators, tol: float = ROW_SUM_TOL) -> PropertyResult:
    """Update rows sum to 1, predict rows to 1/2."""
    su, sp_ = ops.row_sums()
    eu, ep = np.abs(su - 1.0), np.abs(sp_ - 0.5)
    worst = float(max(eu.max(), ep.max()))
    cx = ""
    if eu.max() > tol:
        i = int(np.argwhere(eu > tol)[0][-1])
        cx = f"update row {i} sums to {su.reshape(-1, su.shape[-1])[:, i].flat[0]:.6g}"
    elif ep.max() > tol:
        i = int(np.argwhere(ep > tol)[0][-1])
        cx = f"predict row {i} sums to {sp_.reshape(-1, sp_.shape[-1])[:, i].flat[0]:.6g}"
    return PropertyResult("row_sums", ops.level, worst <= tol, worst, tol, cx)


def gradient_check(task: str = "reconstruction", seed: int = 0, step: float = 1e-6,
                   lam: float = 0.1, gamma: float = 0.01, channels: int = 2, batch: int = 3,
                   h: IcosphereHierarchy | None = None, pooling: str = "lift_adaptive") -> tuple[float, str]:
    """Central-difference check of every parameter gradient of a level-1 network.

    Returns the worst relative error ``|g - fd| / max(|g|, |fd|, GRAD_FLOOR)``
    and the parameter entry where it occurs.
    """
    h = build_hierarchy(1) if h is None else h
    rng = np.random.default_rng(seed)
    cfg = NetworkConfig(max_level=1, min_level=0, in_channels=channels, channels=[3, 3],
                        pooling=pooling, task=task, n_classes=3, lam=lam, gamma=gamma,
                        attention_hidden=3, seed=seed)
    params = init_params(cfg, rng)
    for k in params:
        # move off the symmetric start so every primitive carries a generic gradient
        params[k] = params[k] + rng.uniform(-0.3, 0.3, params[k].shape)
    x = rng.uniform(0.0, 1.0, (batch, h.num_nodes(1), channels))
    y = x if task == "reconstruction" else rng.integers(0, 3, batch)
    net = Network(cfg, h)

    def loss(p, with_grad=False):
        tape = ad.Tape()
        pv = {k: (tape.param(k, v) if with_grad else tape.const(v)) for k, v in p.items()}
        terms = net.loss(pv, tape.const(x), y)
        return (float(terms.total.value), tape.backward(terms.total)) if with_grad else float(terms.total.value)

    _, grads = loss(params, with_grad=True)
    worst, where = 0.0, ""
    for k in sorted(params):
        for idx in np.ndindex(params[k].shape):
            orig = params[k][idx]
            params[k][idx] = orig + step
            fp = loss(params)
            params[k][idx] = orig - step
            fm = loss(params)
            params[k][idx] = orig
            fd = (fp - fm) / (2 * step)
            g = grads[k][idx]
            rel = abs(g - fd) / max(abs(g), abs(fd), GRAD_FLOOR)
            if rel > worst:
                worst, where = rel, f"{k}{list(idx)}: analytic {g:.6e}, finite difference {fd:.6e}"
    return worst, where


def check_gradient(task: str = "reconstruction", seed: int = 0, tol: float = GRAD_TOL) -> PropertyResult:
    worst, where = gradient_check(task, seed)
    return PropertyResult(f"gradient[{task[:5]}]", 1, worst <= tol, worst, tol, where if worst > tol else "")


def random_adaptive_operators(h: IcosphereHierarchy, level: int, rng: np.random.Generator,
                              channels: int = 4, hidden: int = 4, scale: float = 1.0) -> LiftingOperators:
    """Attention operators from random parameters on random features (a generic valid operator set)."""
    ap = AttentionParams.init({level: channels}, hidden, rng=rng, scale=scale)
    x = rng.normal(size=(h.num_nodes(level), channels))
    return compute_operators(x, h.blocks(level), ap)


def run_battery(h: IcosphereHierarchy, levels=None, ops: dict[int, LiftingOperators] | None = None,
                seed: int = 0, gradients: bool = True, n_impulses: int = 50) -> list[PropertyResult]:
    """Mesh invariants plus every lifting property on the given levels.

    ``ops`` overrides the operators per level; by default handcrafted
    operators are checked, and invertibility additionally on random adaptive
    operators.
    """
    rng = np.random.default_rng(seed)
    levels = list(range(1, h.max_level + 1)) if levels is None else list(levels)
    results = []
    for chk in validate_hierarchy(h):
        results.append(PropertyResult(f"mesh.{chk.name}", None, chk.passed, 0.0 if chk.passed else 1.0, 0.0,
                                      "" if chk.passed else f"index {chk.first_index}: {chk.detail}"))
    for level in levels:
        op = (ops or {}).get(level) or handcrafted_operators(h.blocks(level))
        results.append(check_row_sums(op))
        results.append(check_invertibility(op, rng))
        if ops is None or level not in ops:
            r = check_invertibility(random_adaptive_operators(h, level, rng), rng)
            results.append(replace(r, name="invertibility_adaptive"))
        results.append(check_vanishing_moment(op))
        results.append(check_idempotence(op, rng))
        if op.update_values.ndim == 1:
            results.append(check_locality(h, op, rng, n_impulses))
    if gradients:
        results.append(check_gradient("reconstruction", seed))
        results.append(check_gradient("classification", seed))
    return results

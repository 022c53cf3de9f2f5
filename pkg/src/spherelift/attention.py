"""Graph-attention lifting operators.

Scores are only evaluated on the cross-partition supports: the update role
scores each (even i, odd j) edge of ``M`` as ``act(x_i W0 w1 + x_j W0 w2)``,
the predict role scores each (odd j, even i) edge of ``N`` the same way with
its own weights.  A row-wise softmax over the support turns update scores into
weights summing to 1; predict weights are halved so rows sum to 1/2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .icosphere import BlockAdjacency
from .lifting import LiftingOperators, SphericalSignal

ROLES = ("update", "predict")


@dataclass
class RoleParams:
    W0: np.ndarray  # (f, f0)
    w1: np.ndarray  # (f0,)
    w2: np.ndarray  # (f0,)

    def __post_init__(self):
        self.W0 = np.asarray(self.W0, dtype=np.float64)
        self.w1 = np.asarray(self.w1, dtype=np.float64).reshape(-1)
        self.w2 = np.asarray(self.w2, dtype=np.float64).reshape(-1)
        f0 = self.W0.shape[1]
        if f0 < 1 or self.w1.shape != (f0,) or self.w2.shape != (f0,):
            raise ValueError(f"inconsistent attention shapes W0{self.W0.shape} w1{self.w1.shape} w2{self.w2.shape}")
        for a in (self.W0, self.w1, self.w2):
            if not np.all(np.isfinite(a)):
                raise ValueError("attention parameters must be finite")

    @classmethod
    def zeros(cls, f: int, f0: int) -> "RoleParams":
        return cls(np.zeros((f, f0)), np.zeros(f0), np.zeros(f0))

    @classmethod
    def random(cls, f: int, f0: int, rng: np.random.Generator, scale: float = 1.0) -> "RoleParams":
        return cls(rng.normal(0, scale, (f, f0)), rng.normal(0, scale, f0), rng.normal(0, scale, f0))

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W0": self.W0, "w1": self.w1, "w2": self.w2}


@dataclass
class AttentionParams:
    """Per-level attention weights; ``roles[level]`` maps role name to weights."""

    roles: dict[int, dict[str, RoleParams]] = field(default_factory=dict)
    alpha: float = 0.2
    share_roles: bool = False

    def role(self, level: int, role: str) -> RoleParams:
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        per = self.roles[level]
        return per["update"] if self.share_roles else per[role]

    @classmethod
    def init(cls, levels_channels: dict[int, int], hidden: int, *, share_roles: bool = False,
             alpha: float = 0.2, rng: np.random.Generator | None = None, scale: float = 0.0):
        """Zero weights by default, which reproduces the handcrafted operators."""
        roles = {}
        for level, f in levels_channels.items():
            names = ("update",) if share_roles else ROLES
            if scale == 0.0 or rng is None:
                roles[level] = {r: RoleParams.zeros(f, hidden) for r in names}
            else:
                roles[level] = {r: RoleParams.random(f, hidden, rng, scale) for r in names}
        return cls(roles, alpha, share_roles)


def leaky(x, alpha: float = 0.2):
    return np.where(x > 0, x, alpha * x)


def attention_score(xi, xj, p: RoleParams, alpha: float = 0.2) -> float:
    xi, xj = np.asarray(xi, dtype=np.float64), np.asarray(xj, dtype=np.float64)
    if xi.shape != (p.W0.shape[0],) or xj.shape != xi.shape:
        raise ValueError(f"feature dims {xi.shape}/{xj.shape} do not match W0 {p.W0.shape}")
    return float(leaky(xi @ p.W0 @ p.w1 + xj @ p.W0 @ p.w2, alpha))


def _node_scores(x: ad.Var, W0, w):
    """(…, n, f) features -> (…, n, 1) per-node half-scores x W0 w."""
    h = ad.matmul(x, W0)
    return ad.matmul(h, ad.reshape(w, (-1, 1)) if isinstance(w, ad.Var) else np.reshape(w, (-1, 1)))


def _edge_scores(pattern, row_part, col_part, alpha):
    s = ad.take(row_part, pattern.rows, axis=-2) + ad.take(col_part, pattern.indices, axis=-2)
    s = ad.leaky_relu(s, alpha)
    return ad.reshape(s, s.shape[:-1])


def operators_on_tape(x: ad.Var, adj: BlockAdjacency, update: dict, predict: dict, alpha: float = 0.2):
    """Record operator construction; returns (update_values, predict_values) Vars.

    ``update``/``predict`` map ``W0``, ``w1``, ``w2`` to Vars or arrays.
    """
    ne = adj.n_even
    if x.shape[-2] != ne + adj.n_odd:
        raise ValueError(f"features have {x.shape[-2]} rows, level {adj.level} needs {ne + adj.n_odd}")
    up, pp = adj.update_pattern, adj.predict_pattern

    su1 = _node_scores(x, update["W0"], update["w1"])
    su2 = _node_scores(x, update["W0"], update["w2"])
    ue, _ = ad.split_nodes(su1, ne)
    _, uo = ad.split_nodes(su2, ne)
    u_vals = ad.row_softmax(up, _edge_scores(up, ue, uo, alpha))

    sp1 = _node_scores(x, predict["W0"], predict["w1"])
    sp2 = _node_scores(x, predict["W0"], predict["w2"])
    _, po = ad.split_nodes(sp1, ne)
    pe, _ = ad.split_nodes(sp2, ne)
    p_vals = ad.scale(ad.row_softmax(pp, _edge_scores(pp, po, pe, alpha)), 0.5)
    return u_vals, p_vals


def compute_operators(x, adj: BlockAdjacency, params: AttentionParams) -> LiftingOperators:
    """Data-dependent operators for one level (batched if ``x`` has leading axes)."""
    xv = x.values if isinstance(x, SphericalSignal) else np.asarray(x, dtype=np.float64)
    if isinstance(x, SphericalSignal) and x.level != adj.level:
        raise ValueError(f"signal level {x.level} != adjacency level {adj.level}")
    tape = ad.Tape()
    u = params.role(adj.level, "update").arrays()
    p = params.role(adj.level, "predict").arrays()
    if xv.shape[-1] != u["W0"].shape[0]:
        raise ValueError(f"feature dim {xv.shape[-1]} != W0 rows {u['W0'].shape[0]}")
    u_vals, p_vals = operators_on_tape(tape.const(xv), adj, u, p, params.alpha)
    return LiftingOperators(adj.level, adj.update_pattern, adj.predict_pattern, u_vals.value, p_vals.value)

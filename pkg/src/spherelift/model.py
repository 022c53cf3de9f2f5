"""Hierarchical spherical encoder/decoder with pluggable pooling.

The encoder alternates a graph-convolution block and pooling from
``max_level`` down to ``min_level``; the decoder mirrors it with unpooling.
Lifting-based pooling records its operators in an op cache that the decoder
reuses at the matching level, with zero detail coefficients.

Parameters are a flat ``dict[str, np.ndarray]`` with names such as
``enc.L3.W``, ``dec.L2.b``, ``attn.L3.update.W0`` and ``head.W``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .attention import ROLES, operators_on_tape
from .icosphere import IcosphereHierarchy
from .lifting import handcrafted_operators
from .sparse import Pattern

POOLINGS = ("lift_adaptive", "lift_handcrafted", "downsample", "mean", "max")
TASKS = ("reconstruction", "classification")


@dataclass
class NetworkConfig:
    max_level: int = 3
    min_level: int = 1
    in_channels: int = 1
    # feature width at max_level, max_level-1, ..., min_level
    channels: list[int] = field(default_factory=lambda: [8, 16, 16])
    pooling: str | list[str] = "lift_adaptive"
    task: str = "reconstruction"
    n_classes: int = 10
    lam: float = 0.1
    gamma: float = 0.01
    seed: int = 0
    block: str = "gconv"  # or "identity"
    attention_hidden: int = 8
    share_roles: bool = False
    alpha: float = 0.2
    # 0 trains the regularizers alone
    task_weight: float = 1.0

    def __post_init__(self):
        self.validate()

    @property
    def levels(self) -> list[int]:
        return list(range(self.max_level, self.min_level - 1, -1))

    def width(self, level: int) -> int:
        return self.channels[self.max_level - level]

    def pool_kind(self, level: int) -> str:
        """Pooling used when going from ``level`` to ``level - 1``."""
        if isinstance(self.pooling, str):
            return self.pooling
        return self.pooling[self.max_level - level]

    def validate(self) -> None:
        if not 0 <= self.min_level < self.max_level:
            raise ValueError(f"need 0 <= min_level < max_level, got {self.min_level}, {self.max_level}")
        span = self.max_level - self.min_level + 1
        if len(self.channels) != span:
            raise ValueError(f"channels has {len(self.channels)} entries, level span is {span}")
        kinds = [self.pooling] if isinstance(self.pooling, str) else list(self.pooling)
        if not isinstance(self.pooling, str) and len(kinds) != span - 1:
            raise ValueError(f"pooling list needs {span - 1} entries, got {len(kinds)}")
        for k in kinds:
            if k not in POOLINGS:
                raise ValueError(f"unknown pooling {k!r}; expected one of {POOLINGS}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.block not in ("gconv", "identity"):
            raise ValueError(f"unknown block {self.block!r}")
        if self.block == "identity" and any(c != self.in_channels for c in self.channels):
            raise ValueError("identity blocks need every channel width equal to in_channels")
        if self.lam < 0 or self.gamma < 0 or self.task_weight < 0:
            raise ValueError("lam, gamma and task_weight must be nonnegative")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, list) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


def init_params(cfg: NetworkConfig, rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform weights, zero biases.

    Attention: ``W0`` random, ``w1 = w2 = 0``, so every score is 0 and the
    first forward pass uses exactly the handcrafted operators while the
    gradient with respect to ``w1``/``w2`` is nonzero.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng

    def dense(f_in, f_out):
        bound = 1.0 / np.sqrt(f_in)
        return rng.uniform(-bound, bound, (f_in, f_out))

    params: dict[str, np.ndarray] = {}
    if cfg.block == "gconv":
        f_in = cfg.in_channels
        for level in cfg.levels:
            f = cfg.width(level)
            params[f"enc.L{level}.W"] = dense(f_in, f)
            params[f"enc.L{level}.b"] = np.zeros(f)
            f_in = f
        if cfg.task == "reconstruction":
            for level in cfg.levels[::-1][1:]:
                f = cfg.width(level)
                params[f"dec.L{level}.W"] = dense(f_in, f)
                params[f"dec.L{level}.b"] = np.zeros(f)
                f_in = f
            params["head.W"] = dense(f_in, cfg.in_channels)
            params["head.b"] = np.zeros(cfg.in_channels)
    if cfg.task == "classification":
        params["head.W"] = dense(cfg.width(cfg.min_level), cfg.n_classes)
        params["head.b"] = np.zeros(cfg.n_classes)
    for level in cfg.levels[:-1]:
        if cfg.pool_kind(level) != "lift_adaptive":
            continue
        f, f0 = cfg.width(level), cfg.attention_hidden
        for role in (("update",) if cfg.share_roles else ROLES):
            params[f"attn.L{level}.{role}.W0"] = dense(f, f0)
            params[f"attn.L{level}.{role}.w1"] = np.zeros(f0)
            params[f"attn.L{level}.{role}.w2"] = np.zeros(f0)
    return params


@dataclass(eq=False)
class CachedOps:
    """Operators produced by one pooling step, reused by the matching unpooling."""

    level: int
    kind: str
    update: ad.Var | np.ndarray | None = None
    predict: ad.Var | np.ndarray | None = None


@dataclass
class EncoderOutput:
    code: ad.Var
    details: list  # detail Vars per lifting level, finest first
    means: list  # (X^l, C^l) pairs per lifting level
    op_cache: dict  # level -> CachedOps


class Network:
    """Binds a config to a hierarchy; all forward methods record onto a tape."""

    def __init__(self, cfg: NetworkConfig, h: IcosphereHierarchy):
        cfg.validate()
        if cfg.max_level > h.max_level:
            raise ValueError(f"network needs level {cfg.max_level}, mesh has {h.max_level}")
        self.cfg = cfg
        self.h = h
        self._conv: dict[int, tuple[Pattern, np.ndarray]] = {}
        self._handcrafted = {}

    def conv_operator(self, level: int) -> tuple[Pattern, np.ndarray]:
        """Row-normalized one-hop aggregation ``D^-1 (A + I)`` as a fixed sparse operator."""
        if level not in self._conv:
            a = self.h.adjacency(level) + sp.identity(self.h.num_nodes(level), format="csr")
            pat = Pattern.from_csr(a)
            vals = (1.0 / pat.row_counts())[pat.rows]
            self._conv[level] = (pat, vals)
        return self._conv[level]

    def handcrafted(self, level: int):
        if level not in self._handcrafted:
            self._handcrafted[level] = handcrafted_operators(self.h.blocks(level))
        return self._handcrafted[level]

    def _block(self, pv, prefix: str, level: int, x: ad.Var) -> ad.Var:
        if self.cfg.block == "identity":
            return x
        pat, vals = self.conv_operator(level)
        agg = ad.spmm(pat, vals.astype(x.value.dtype), x)
        return ad.relu(agg @ pv[f"{prefix}.L{level}.W"] + pv[f"{prefix}.L{level}.b"])

    def _pool(self, pv, level: int, x: ad.Var, enc: EncoderOutput) -> ad.Var:
        kind = self.cfg.pool_kind(level)
        adj = self.h.blocks(level)
        ne = adj.n_even
        if kind in ("downsample", "mean", "max"):
            enc.op_cache[level] = CachedOps(level, kind)
            xe, xo = ad.split_nodes(x, ne)
            if kind == "downsample":
                return xe
            pat = adj.update_pattern
            if kind == "mean":
                ones = np.ones(pat.nnz, dtype=x.value.dtype)
                inv = (1.0 / (1.0 + pat.row_counts()))[:, None].astype(x.value.dtype)
                return (xe + ad.spmm(pat, ones, xo)) * inv
            return self._max_pool(x, adj)
        if kind == "lift_handcrafted":
            ops = self.handcrafted(level)
            u = ops.update_values.astype(x.value.dtype)
            p = ops.predict_values.astype(x.value.dtype)
        else:
            role_u = {k: pv[f"attn.L{level}.update.{k}"] for k in ("W0", "w1", "w2")}
            rp = "update" if self.cfg.share_roles else "predict"
            role_p = {k: pv[f"attn.L{level}.{rp}.{k}"] for k in ("W0", "w1", "w2")}
            u, p = operators_on_tape(x, adj, role_u, role_p, self.cfg.alpha)
        enc.op_cache[level] = CachedOps(level, kind, u, p)
        xe, xo = ad.split_nodes(x, ne)
        c = xe + ad.spmm(adj.update_pattern, u, xo)
        d = xo - ad.spmm(adj.predict_pattern, p, c)
        enc.details.append(d)
        enc.means.append((x, c))
        return c

    def _max_pool(self, x: ad.Var, adj) -> ad.Var:
        """Max over each even node and its odd neighbors, recorded as an argmax gather."""
        pat = adj.update_pattern
        ne = adj.n_even
        # candidate k = 0 is the even node itself, k >= 1 its odd neighbors (padded by repetition)
        counts = pat.row_counts()
        width = int(counts.max())
        slots = np.minimum(np.arange(width)[None, :], counts[:, None] - 1)
        nbr = pat.indices[pat.indptr[:-1][:, None] + slots] + ne
        cand_idx = np.concatenate([np.arange(ne)[:, None], nbr], axis=1)  # (ne, width+1)
        vals = x.value[..., cand_idx, :]  # (..., ne, width+1, f)
        arg = vals.argmax(axis=-2)  # (..., ne, f)
        src = np.take_along_axis(np.broadcast_to(cand_idx[..., None], vals.shape), arg[..., None, :], axis=-2)[..., 0, :]
        return _gather_max(x, src)

    def _unpool(self, level: int, c: ad.Var, cache: CachedOps) -> ad.Var:
        adj = self.h.blocks(level)
        if cache.kind in ("downsample", "mean", "max"):
            pad = np.zeros(c.shape[:-2] + (adj.n_odd, c.shape[-1]), dtype=c.value.dtype)
            return ad.concat_nodes(c, pad)
        xo = ad.spmm(adj.predict_pattern, cache.predict, c)
        xe = c - ad.spmm(adj.update_pattern, cache.update, xo)
        return ad.concat_nodes(xe, xo)

    # ------------------------------------------------------------------
    def encoder(self, pv: dict, x: ad.Var) -> EncoderOutput:
        cfg = self.cfg
        if x.shape[-2] != self.h.num_nodes(cfg.max_level) or x.shape[-1] != cfg.in_channels:
            raise ValueError(f"input shape {x.shape} does not match level {cfg.max_level} "
                             f"with {cfg.in_channels} channels")
        enc = EncoderOutput(x, [], [], {})
        for level in cfg.levels:
            x = self._block(pv, "enc", level, x)
            if level > cfg.min_level:
                x = self._pool(pv, level, x, enc)
        enc.code = x
        return enc

    def decoder(self, pv: dict, code: ad.Var, op_cache: dict) -> ad.Var:
        cfg = self.cfg
        x = code
        for level in range(cfg.min_level + 1, cfg.max_level + 1):
            if level not in op_cache:
                raise KeyError(f"no cached pooling operators for level {level}")
            x = self._unpool(level, x, op_cache[level])
            x = self._block(pv, "dec", level, x)
        if cfg.block == "gconv":
            x = x @ pv["head.W"] + pv["head.b"]
        return x

    def classify(self, pv: dict, x: ad.Var) -> tuple[ad.Var, EncoderOutput]:
        enc = self.encoder(pv, x)
        pooled = ad.mean(enc.code, axis=-2)
        return pooled @ pv["head.W"] + pv["head.b"], enc

    def forward(self, pv: dict, x: ad.Var):
        """Task output and encoder record (details, means, op cache)."""
        if self.cfg.task == "classification":
            return self.classify(pv, x)
        enc = self.encoder(pv, x)
        return self.decoder(pv, enc.code, enc.op_cache), enc

    def loss(self, pv: dict, x: ad.Var, target) -> "LossTerms":
        out, enc = self.forward(pv, x)
        cfg = self.cfg
        return total_loss(out, target, enc.details, enc.means, cfg.lam, cfg.gamma, cfg.task, cfg.task_weight)


def _gather_max(x: ad.Var, src: np.ndarray) -> ad.Var:
    """out[..., i, f] = x[..., src[..., i, f], f]; adjoint routes to the argmax."""
    shape = x.shape
    out = np.take_along_axis(x.value, src, axis=-2)

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        lead = np.indices(src.shape)
        idx = tuple(lead[:-2]) + (src, lead[-1])
        np.add.at(gx, idx, g)
        return (gx,)

    return x.tape._push("gather_max", out, (x,), bw)


@dataclass
class LossTerms:
    total: ad.Var
    task: ad.Var
    detail: ad.Var | None
    mean: ad.Var | None

    def values(self) -> dict[str, float]:
        def f(v):
            return 0.0 if v is None else float(v.value)
        return {"task": f(self.task), "detail": f(self.detail), "mean": f(self.mean), "total": f(self.total)}


def total_loss(out: ad.Var, target, details: list, means: list, lam: float, gamma: float,
               task: str = "reconstruction", task_weight: float = 1.0) -> LossTerms:
    """``task_weight * task + lam * sum_l ||D^l|| + gamma * sum_l ||Mean(X^l) - Mean(C^l)||``.

    Norms are per sample (Frobenius for ``D``, Euclidean over channels for the
    mean gap) and averaged over the batch axis.
    """
    if task == "reconstruction":
        target = np.asarray(target, dtype=out.value.dtype)
        if target.shape != out.shape:
            raise ValueError(f"target shape {target.shape} != output shape {out.shape}")
        err = out - target
        task_loss = ad.mean(err * err)
    elif task == "classification":
        task_loss = ad.cross_entropy(out, target)
    else:
        raise ValueError(f"unknown task {task!r}")
    total = task_loss if task_weight == 1.0 else ad.scale(task_loss, task_weight)
    detail = mean_gap = None
    for d in details:
        term = ad.mean(ad.norm(d, axis=(-2, -1)))
        detail = term if detail is None else detail + term
    for xl, cl in means:
        gap = ad.mean(xl, axis=-2) - ad.mean(cl, axis=-2)
        term = ad.mean(ad.norm(gap, axis=-1))
        mean_gap = term if mean_gap is None else mean_gap + term
    if detail is not None:
        total = total + ad.scale(detail, lam)
    if mean_gap is not None:
        total = total + ad.scale(mean_gap, gamma)
    if not np.isfinite(total.value):
        raise FloatingPointError("nonfinite loss")
    return LossTerms(total, task_loss, detail, mean_gap)


# ----------------------------------------------------------------------
# eager entry points


def _batched(x) -> tuple[np.ndarray, bool]:
    xv = x.values if hasattr(x, "values") and not isinstance(x, np.ndarray) else np.asarray(x)
    return (xv, False) if xv.ndim == 3 else (xv[None], True)


def _bind(params: dict) -> tuple[ad.Tape, dict]:
    tape = ad.Tape()
    return tape, {k: tape.param(k, v) for k, v in params.items()}


def encoder_forward(x, cfg: NetworkConfig, params: dict, h: IcosphereHierarchy):
    """Eager encoder: (code, details, op_cache) as arrays."""
    net = Network(cfg, h)
    xv, squeeze = _batched(x)
    tape, pv = _bind(params)
    enc = net.encoder(pv, tape.const(xv))
    strip = (lambda a: a[0]) if squeeze else (lambda a: a)
    cache = {
        lvl: CachedOps(c.level, c.kind,
                       None if c.update is None else _val(c.update),
                       None if c.predict is None else _val(c.predict))
        for lvl, c in enc.op_cache.items()
    }
    return strip(enc.code.value), [strip(d.value) for d in enc.details], cache


def _val(v):
    return v.value if isinstance(v, ad.Var) else v


def decoder_forward(code, op_cache: dict, cfg: NetworkConfig, params: dict, h: IcosphereHierarchy):
    net = Network(cfg, h)
    cv, squeeze = _batched(code)
    tape, pv = _bind(params)
    out = net.decoder(pv, tape.const(cv), op_cache)
    return out.value[0] if squeeze else out.value


def classify_forward(x, cfg: NetworkConfig, params: dict, h: IcosphereHierarchy):
    net = Network(cfg, h)
    xv, squeeze = _batched(x)
    tape, pv = _bind(params)
    logits, enc = net.classify(pv, tape.const(xv))
    details = [d.value[0] if squeeze else d.value for d in enc.details]
    return (logits.value[0] if squeeze else logits.value), details

"""Training loop, evaluation metrics, and the pooling comparison harness."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .icosphere import IcosphereHierarchy
from .model import Network, NetworkConfig, init_params, total_loss
from .signals import SyntheticSpec, generate_dataset


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, msg: str = ""):
        super().__init__(f"nonfinite loss at epoch {epoch}{': ' + msg if msg else ''}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 32
    # when set, override the network's regularizer weights
    lam: float | None = None
    gamma: float | None = None
    seed: int = 0
    precision: str = "float64"
    val_fraction: float = 0.1
    eval_batch: int = 64

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class Adam:
    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in sorted(params):
            dt = params[k].dtype
            g = np.asarray(grads[k], dtype=dt)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            step = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            params[k] = (params[k] - step).astype(dt, copy=False)


@dataclass
class Checkpoint:
    net: NetworkConfig
    params: dict
    train: TrainConfig | None = None
    epoch: int = 0


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    wall_clock: list[float] = field(default_factory=list)

    COLUMNS = ("epoch", "task", "detail", "mean", "total", "val_task", "metric")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([r["epoch"]] + [repr(float(r[c])) for c in self.COLUMNS[1:]])
        return buf.getvalue()


def _split(n: int, val_fraction: float, seed: int):
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    if n_val == 0 and val_fraction > 0 and n > 1:
        n_val = 1
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _targets(net_cfg: NetworkConfig, data: dict, idx) -> np.ndarray:
    if net_cfg.task == "classification":
        return np.asarray(data["y"])[idx]
    return np.asarray(data.get("y", data["x"]))[idx]


def batch_loss(net: Network, params: dict, x: np.ndarray, y, with_grad: bool = True):
    tape = ad.Tape()
    pv = {k: (tape.param(k, v) if with_grad else tape.const(v)) for k, v in params.items()}
    terms = net.loss(pv, tape.const(x), y)
    grads = tape.backward(terms.total) if with_grad else None
    return terms, grads


def _metric(net_cfg: NetworkConfig, out: np.ndarray, y) -> np.ndarray:
    """Per-sample squared error mean (reconstruction) or correctness (classification)."""
    if net_cfg.task == "classification":
        return (out.argmax(axis=-1) == np.asarray(y)).astype(np.float64)
    return ((out - y) ** 2).reshape(len(out), -1).mean(axis=1)


def evaluate_params(net: Network, params: dict, x: np.ndarray, y, batch: int = 64) -> dict:
    """Dataset-averaged loss terms and metric (MSE or accuracy); never mutates params."""
    if len(x) == 0:
        return {"task": float("nan"), "detail": 0.0, "mean": 0.0, "total": float("nan"), "metric": float("nan")}
    sums = {"task": 0.0, "detail": 0.0, "mean": 0.0, "total": 0.0}
    per_sample = []
    for s in range(0, len(x), batch):
        xb, yb = x[s:s + batch], y[s:s + batch]
        tape = ad.Tape()
        pv = {k: tape.const(v) for k, v in params.items()}
        out, enc = net.forward(pv, tape.const(xb))
        cfg = net.cfg
        terms = total_loss(out, yb, enc.details, enc.means, cfg.lam, cfg.gamma, cfg.task, cfg.task_weight)
        for k, v in terms.values().items():
            sums[k] += v * len(xb)
        per_sample.append(_metric(net.cfg, out.value, yb))
    res = {k: v / len(x) for k, v in sums.items()}
    res["metric"] = float(np.concatenate(per_sample).mean())
    return res


def train(cfg: TrainConfig, net_cfg: NetworkConfig, data: dict, h: IcosphereHierarchy,
          log=None) -> tuple[Checkpoint, MetricsReport]:
    """Minibatch Adam with best-validation checkpoint selection.

    ``data`` holds ``x`` of shape (N, nodes, channels) and, for
    classification, integer labels ``y``.  Row ``epoch = 0`` of the report
    evaluates the initial parameters.
    """
    if cfg.lam is not None or cfg.gamma is not None:
        net_cfg = replace(net_cfg,
                          lam=net_cfg.lam if cfg.lam is None else cfg.lam,
                          gamma=net_cfg.gamma if cfg.gamma is None else cfg.gamma)
    net = Network(net_cfg, h)
    dt = cfg.dtype
    x_all = np.asarray(data["x"], dtype=dt)
    tr, va = _split(len(x_all), cfg.val_fraction, cfg.seed)
    x_tr, y_tr = x_all[tr], _targets(net_cfg, data, tr)
    x_va, y_va = x_all[va], _targets(net_cfg, data, va)
    if net_cfg.task == "reconstruction":
        y_tr, y_va = y_tr.astype(dt), y_va.astype(dt)

    rng = np.random.default_rng(cfg.seed)
    params = {k: v.astype(dt) for k, v in init_params(net_cfg, rng).items()}
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    report = MetricsReport()

    def record(epoch):
        try:
            trm = evaluate_params(net, params, x_tr, y_tr, cfg.eval_batch)
            vam = evaluate_params(net, params, x_va, y_va, cfg.eval_batch) if len(x_va) else trm
        except FloatingPointError as e:
            raise TrainingDiverged(epoch, str(e)) from e
        for k in ("task", "total"):
            if not np.isfinite(trm[k]):
                raise TrainingDiverged(epoch)
        row = {"epoch": epoch, "task": trm["task"], "detail": trm["detail"], "mean": trm["mean"],
               "total": trm["total"], "val_task": vam["task"], "metric": vam["metric"]}
        report.rows.append(row)
        if log:
            log({"event": "epoch", **row})
        return row

    row = record(0)
    best = (row["val_task"], 0, {k: v.copy() for k, v in params.items()})
    report.wall_clock.append(0.0)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(x_tr))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            try:
                _, grads = batch_loss(net, params, x_tr[idx], y_tr[idx])
            except FloatingPointError as e:
                raise TrainingDiverged(epoch, str(e)) from e
            opt.step(params, grads)
        row = record(epoch)
        report.wall_clock.append(time.perf_counter() - t0)
        if row["val_task"] < best[0]:
            best = (row["val_task"], epoch, {k: v.copy() for k, v in params.items()})
    _, best_epoch, best_params = best
    report.final = {"best_epoch": best_epoch, "val_task": best[0]}
    return Checkpoint(net_cfg, best_params, cfg, best_epoch), report


def evaluate(ckpt: Checkpoint, data: dict, h: IcosphereHierarchy, batch: int = 64) -> dict:
    net = Network(ckpt.net, h)
    expected = set(init_params(ckpt.net, np.random.default_rng(0)))
    if set(ckpt.params) != expected:
        raise ValueError(f"checkpoint parameters do not match the network: "
                         f"missing {sorted(expected - set(ckpt.params))}, extra {sorted(set(ckpt.params) - expected)}")
    dt = next(iter(ckpt.params.values())).dtype if ckpt.params else np.float64
    x = np.asarray(data["x"], dtype=dt)
    y = _targets(ckpt.net, data, slice(None))
    if ckpt.net.task == "reconstruction":
        y = np.asarray(y, dtype=dt)
    res = evaluate_params(net, ckpt.params, x, y, batch)
    res["metric_name"] = "accuracy" if ckpt.net.task == "classification" else "mse"
    return res


def mse(pred, target) -> float:
    return float(np.mean((np.asarray(pred) - np.asarray(target)) ** 2))


def accuracy(logits, labels) -> float:
    return float(np.mean(np.asarray(logits).argmax(axis=-1) == np.asarray(labels)))


def segmentation_scores(pred_labels, true_labels, n_classes: int) -> tuple[float, float]:
    """Mean IoU and mean per-class accuracy over classes present in the ground truth."""
    p, t = np.asarray(pred_labels).ravel(), np.asarray(true_labels).ravel()
    ious, accs = [], []
    for c in range(n_classes):
        tc, pc = t == c, p == c
        if not tc.any():
            continue
        ious.append((tc & pc).sum() / (tc | pc).sum())
        accs.append((tc & pc).sum() / tc.sum())
    return float(np.mean(ious)), float(np.mean(accs))


COMPARE_KINDS = ("downsample", "mean", "max", "lift_handcrafted", "lift_adaptive")


def compare_poolings(net_base: NetworkConfig, kinds, train_data: dict, test_data: dict,
                     cfg: TrainConfig, h: IcosphereHierarchy, seeds=(0,), log=None) -> list[dict]:
    """Train one model per (kind, seed) with identical backbone and seeds; return result rows."""
    rows = []
    for kind in kinds:
        if kind not in COMPARE_KINDS:
            raise ValueError(f"unknown pooling kind {kind!r}")
        for seed in seeds:
            net = replace(net_base, pooling=kind, seed=seed)
            t0 = time.perf_counter()
            ckpt, rep = train(replace(cfg, seed=seed), net, train_data, h)
            res = evaluate(ckpt, test_data, h, cfg.eval_batch)
            row = {"kind": kind, "seed": seed, "best_epoch": ckpt.epoch,
                   "test_task": res["task"], "test_metric": res["metric"],
                   "test_detail": res["detail"], "train_seconds": time.perf_counter() - t0}
            rows.append(row)
            if log:
                log({"event": "compare", **row})
    return rows


def summarize(rows: list[dict], key: str = "test_metric") -> dict[str, float]:
    """Median of ``key`` per pooling kind."""
    out = {}
    for kind in dict.fromkeys(r["kind"] for r in rows):
        out[kind] = float(np.median([r[key] for r in rows if r["kind"] == kind]))
    return out


def rows_to_csv(rows: list[dict], columns=("kind", "seed", "best_epoch", "test_task", "test_metric", "test_detail")) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()


# desk-scale reconstruction comparison: level 3 -> 1, band limit 8, 500 train / 100 test
DESK_NETWORK = NetworkConfig(max_level=3, min_level=1, channels=[8, 16, 16], lam=0.01, gamma=0.01)
DESK_TRAIN = TrainConfig(lr=3e-3, epochs=40, batch_size=16)


def desk_data(h: IcosphereHierarchy, n_train: int = 500, n_test: int = 100, band_limit: int = 8,
              level: int = 3) -> tuple[dict, dict]:
    """Band-limited train/test sets with disjoint seed ranges."""
    train_x = generate_dataset(SyntheticSpec("bandlimited", level, 1, band_limit, seed=0), h, n_train)
    test_x = generate_dataset(SyntheticSpec("bandlimited", level, 1, band_limit, seed=100_000), h, n_test)
    return {"x": train_x}, {"x": test_x}

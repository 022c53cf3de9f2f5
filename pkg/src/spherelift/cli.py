"""Command-line front end: ``spherelift <subcommand> ...``.

Exit codes: 0 ok, 2 usage, 3 config, 4 data, 5 property failure.  Errors go
to stderr as one JSON line; progress events are JSON lines on stderr (or the
``--log`` file).  Every run that writes output also writes a manifest.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import os
import platform
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__
from .attention import compute_operators
from .formats import (FormatError, attention_from_params, load_checkpoint, load_mesh, load_signal,
                      load_signals, save_checkpoint, save_mesh, save_signal, save_signals)
from .icosphere import IcosphereHierarchy, build_hierarchy
from .lifting import SphericalSignal, SubbandPair, handcrafted_operators, lift_backward, lift_forward
from .model import NetworkConfig
from .properties import run_battery
from .signals import IDXError, SyntheticSpec, generate, load_idx, project_image
from .trainer import (COMPARE_KINDS, DESK_NETWORK, DESK_TRAIN, Checkpoint, TrainConfig,
                      TrainingDiverged, compare_poolings, desk_data, evaluate, rows_to_csv,
                      summarize, train)

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_PROPERTY = 0, 2, 3, 4, 5
SEED_ENV = "SPHERELIFT_SEED"


class CLIError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


def config_error(msg: str) -> CLIError:
    return CLIError(EXIT_CONFIG, "config", msg)


def data_error(msg: str) -> CLIError:
    return CLIError(EXIT_DATA, "data", msg)


class EventLog:
    """Line-delimited JSON events."""

    def __init__(self, stream):
        self.stream = stream

    def __call__(self, event: dict) -> None:
        self.stream.write(json.dumps(event, sort_keys=True, default=_jsonable) + "\n")
        self.stream.flush()


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# ----------------------------------------------------------------------
# helpers


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise config_error(f"{SEED_ENV}={raw!r} is not an integer") from None


def _load_json(text: str | None, what: str) -> dict:
    if text is None:
        return {}
    if text.lstrip().startswith("{"):
        src = text
    else:
        p = Path(text)
        if not p.exists():
            raise config_error(f"{what} file not found: {text}")
        src = p.read_text()
    try:
        val = json.loads(src)
    except json.JSONDecodeError as e:
        raise config_error(f"malformed {what} JSON: {e}") from None
    if not isinstance(val, dict):
        raise config_error(f"{what} must be a JSON object")
    return val


def _config_hash(cfg) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=_jsonable).encode()).hexdigest()


def write_manifest(path: Path, command: str, argv: list[str], config, seed: int) -> Path:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "config_hash": _config_hash(config),
        "seed": seed,
        "versions": {"spherelift": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True, default=_jsonable))
    return path


def _manifest_path(out: Path, is_dir: bool) -> Path:
    return out / "manifest.json" if is_dir else out.with_name(out.name + ".manifest.json")


def _mesh(path: str | None, level: int) -> IcosphereHierarchy:
    if path is None:
        try:
            return build_hierarchy(level)
        except ValueError as e:
            raise config_error(str(e)) from None
    p = Path(path)
    if not p.exists():
        raise data_error(f"mesh file not found: {path}")
    h = load_mesh(p)
    if h.max_level < level:
        raise data_error(f"mesh {path} stops at level {h.max_level}, need level {level}")
    return h


def _net_config(d: dict, **overrides) -> NetworkConfig:
    try:
        return NetworkConfig.from_dict({**d, **overrides})
    except (TypeError, ValueError) as e:
        raise config_error(f"network config: {e}") from None


def _train_config(d: dict, **overrides) -> TrainConfig:
    try:
        return TrainConfig.from_dict({**d, **overrides})
    except (TypeError, ValueError) as e:
        raise config_error(f"train config: {e}") from None


def _split_config(cfg: dict) -> tuple[dict, dict, dict]:
    unknown = set(cfg) - {"network", "train", "data"}
    if unknown:
        raise config_error(f"unknown config sections: {sorted(unknown)}")
    return dict(cfg.get("network", {})), dict(cfg.get("train", {})), dict(cfg.get("data", {}))


def _synthetic(h: IcosphereHierarchy, level: int, data_cfg: dict):
    allowed = {"n_train", "n_test", "band_limit"}
    if set(data_cfg) - allowed:
        raise config_error(f"unknown data keys: {sorted(set(data_cfg) - allowed)}")
    try:
        return desk_data(h, level=level, **data_cfg)
    except (TypeError, ValueError) as e:
        raise config_error(f"data config: {e}") from None


def _dataset(path: str, net: NetworkConfig) -> dict:
    x, level, labels = load_signals(path)
    if level != net.max_level or x.shape[-1] != net.in_channels:
        raise data_error(f"{path}: level {level} with {x.shape[-1]} channels, network expects "
                         f"level {net.max_level} with {net.in_channels}")
    data = {"x": x}
    if net.task == "classification":
        if labels is None:
            raise data_error(f"{path}: classification needs labels.json")
        if max(labels) >= net.n_classes or min(labels) < 0:
            raise data_error(f"{path}: labels outside 0..{net.n_classes - 1}")
        data["y"] = np.asarray(labels)
    return data


# ----------------------------------------------------------------------
# subcommands


def cmd_mesh(args, log) -> int:
    h = _mesh(None, args.max_level)
    out = Path(args.out)
    save_mesh(out, h)
    write_manifest(_manifest_path(out, False), "mesh", args.argv, {"max_level": args.max_level}, args.seed)
    log({"event": "mesh", "max_level": h.max_level, "nodes": [h.num_nodes(l) for l in range(h.max_level + 1)]})
    return EXIT_OK


def cmd_gen(args, log) -> int:
    spec_d = _load_json(args.spec, "spec")
    spec_d.setdefault("seed", args.seed)
    try:
        spec = SyntheticSpec(**spec_d)
    except TypeError as e:
        raise config_error(f"spec: {e}") from None
    h = _mesh(args.mesh, spec.level)
    try:
        spec.validate(h)
    except ValueError as e:
        raise config_error(str(e)) from None
    sigs = [generate(replace(spec, seed=spec.seed + i), h) for i in range(args.count)]
    out = Path(args.out)
    save_signals(out, sigs)
    write_manifest(out / "manifest.json", "gen", args.argv, {"spec": spec.__dict__, "count": args.count}, spec.seed)
    log({"event": "gen", "count": len(sigs), "level": spec.level})
    return EXIT_OK


def cmd_project(args, log) -> int:
    for p in (args.idx, args.labels):
        if p is not None and not Path(p).exists():
            raise data_error(f"file not found: {p}")
    images, labels = load_idx(args.idx, args.labels)
    if args.limit is not None:
        images = images[:args.limit]
        labels = None if labels is None else labels[:args.limit]
    h = _mesh(args.mesh, args.level)
    sigs = [project_image(img, h, args.level) for img in images]
    out = Path(args.out)
    save_signals(out, sigs, labels)
    write_manifest(out / "manifest.json", "project", args.argv,
                   {"idx": args.idx, "labels": args.labels, "level": args.level, "limit": args.limit}, args.seed)
    log({"event": "project", "count": len(sigs), "level": args.level})
    return EXIT_OK


def _transform_ops(args, h, sig: SphericalSignal):
    adj = h.blocks(sig.level)
    if args.ops[0] == "handcrafted":
        if len(args.ops) != 1:
            raise CLIError(EXIT_USAGE, "usage", "--ops handcrafted takes no path")
        return handcrafted_operators(adj)
    if args.ops[0] != "checkpoint" or len(args.ops) != 2:
        raise CLIError(EXIT_USAGE, "usage", "--ops must be 'handcrafted' or 'checkpoint PATH'")
    manifest, params = load_checkpoint(args.ops[1])
    meta = manifest.get("attention") or {}
    ap = attention_from_params(params, meta.get("alpha", 0.2), bool(meta.get("share_roles", False)))
    if sig.level not in ap.roles:
        raise data_error(f"checkpoint has no attention weights for level {sig.level}")
    # adaptive operators are computed from the signal being analysed; the
    # inverse needs that same signal
    feats = sig
    if args.direction == "backward":
        if args.features is None:
            raise config_error("backward transform with checkpoint operators needs --features")
        feats = load_signal(args.features)
        if feats.level != sig.level:
            raise data_error("--features level differs from the signal level")
    try:
        return compute_operators(feats, adj, ap)
    except ValueError as e:
        raise data_error(str(e)) from None


def cmd_transform(args, log) -> int:
    sig = load_signal(args.signal)
    h = _mesh(args.mesh, sig.level)
    if sig.level < 1:
        raise data_error("transforms need a signal at level >= 1")
    ops = _transform_ops(args, h, sig)
    ne = ops.n_even
    if args.direction == "forward":
        sub = lift_forward(sig, ops)
        # coefficients keep the node layout: C on even rows, D on odd rows
        out_sig = SphericalSignal(sig.level, np.concatenate([sub.C, sub.D], axis=-2))
    else:
        v = sig.values
        out_sig = lift_backward(SubbandPair(v[:ne], v[ne:]), ops)
    out = Path(args.out)
    save_signal(out, out_sig)
    write_manifest(_manifest_path(out, False), "transform", args.argv,
                   {"ops": args.ops, "direction": args.direction, "signal": args.signal}, args.seed)
    log({"event": "transform", "direction": args.direction, "level": sig.level})
    return EXIT_OK


def cmd_check(args, log) -> int:
    if args.mesh is None:
        h = build_hierarchy(args.level if args.level is not None else 3)
    else:
        h = _mesh(args.mesh, args.level or 0)
    if args.level is not None and not 1 <= args.level <= h.max_level:
        raise config_error(f"level {args.level} outside 1..{h.max_level}")
    levels = None if args.level is None else [args.level]
    results = run_battery(h, levels, seed=args.seed, gradients=not args.no_gradients)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    log({"event": "check", "total": len(results), "failed": len(failed)})
    if failed:
        print(f"{len(failed)} of {len(results)} properties failed")
        return EXIT_PROPERTY
    print(f"all {len(results)} properties passed")
    return EXIT_OK


def _task_name(task: str | None) -> str | None:
    return {"recon": "reconstruction", "cls": "classification", None: None}.get(task, task)


def cmd_train(args, log) -> int:
    cfg = _load_json(args.config, "config")
    net_d, train_d, data_d = _split_config(cfg)
    task = _task_name(args.task)
    if task is not None:
        net_d["task"] = task
    net_d.setdefault("seed", args.seed)
    train_d.setdefault("seed", args.seed)
    net = _net_config(net_d)
    tcfg = _train_config(train_d)
    h = _mesh(args.mesh, net.max_level)
    if args.data is not None:
        data = _dataset(args.data, net)
    elif net.task == "reconstruction":
        data, _ = _synthetic(h, net.max_level, data_d)
    else:
        raise config_error("classification training needs --data with labels")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {"network": net.to_dict(), "train": tcfg.to_dict(), "data": args.data or data_d}
    write_manifest(out / "manifest.json", "train", args.argv, resolved, tcfg.seed)
    try:
        ckpt, report = train(tcfg, net, data, h, log=log)
    except TrainingDiverged as e:
        raise CLIError(EXIT_DATA, "diverged", str(e)) from None
    (out / "metrics.csv").write_text(report.to_csv())
    save_checkpoint(out / "checkpoint", ckpt.params, network=ckpt.net.to_dict(), train=tcfg.to_dict(),
                    epoch=ckpt.epoch, alpha=net.alpha, share_roles=net.share_roles)
    summary = {"best_epoch": ckpt.epoch, "val_task": report.final["val_task"],
               "final_metric": report.rows[ckpt.epoch]["metric"],
               "metric_name": "accuracy" if net.task == "classification" else "mse"}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    log({"event": "done", **summary})
    return EXIT_OK


def _load_ckpt(path: str) -> Checkpoint:
    if not Path(path).is_dir():
        raise data_error(f"checkpoint directory not found: {path}")
    manifest, params = load_checkpoint(path)
    if not manifest.get("network"):
        raise data_error(f"{path}: checkpoint has no network config")
    net = _net_config(manifest["network"])
    tcfg = _train_config(manifest["train"]) if manifest.get("train") else TrainConfig()
    params = {k: v.astype(tcfg.dtype) for k, v in params.items()}
    return Checkpoint(net, params, tcfg, manifest.get("epoch", 0))


def cmd_eval(args, log) -> int:
    ckpt = _load_ckpt(args.ckpt)
    h = _mesh(args.mesh, ckpt.net.max_level)
    data = _dataset(args.data, ckpt.net)
    try:
        res = evaluate(ckpt, data, h)
    except ValueError as e:
        raise data_error(str(e)) from None
    print(json.dumps(res, sort_keys=True))
    if args.out:
        out = Path(args.out)
        out.write_text(json.dumps(res, indent=1, sort_keys=True))
        write_manifest(_manifest_path(out, False), "eval", args.argv, {"ckpt": args.ckpt, "data": args.data},
                       args.seed)
    log({"event": "eval", **{k: v for k, v in res.items() if k != "metric_name"}})
    return EXIT_OK


def cmd_compare(args, log) -> int:
    cfg = _load_json(args.config, "config")
    net_d, train_d, data_d = _split_config(cfg)
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    bad = [k for k in kinds if k not in COMPARE_KINDS]
    if not kinds or bad:
        raise config_error(f"unknown pooling kinds {bad}; expected a subset of {list(COMPARE_KINDS)}")
    net = _net_config({**DESK_NETWORK.to_dict(), **net_d})
    if net.task != "reconstruction":
        raise config_error("compare runs the reconstruction task")
    tcfg = _train_config({**DESK_TRAIN.to_dict(), **train_d})
    try:
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed + i for i in range(3)]
    except ValueError:
        raise config_error(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    h = _mesh(args.mesh, net.max_level)
    train_data, test_data = _synthetic(h, net.max_level, data_d)
    out = Path(args.out)
    resolved = {"network": net.to_dict(), "train": tcfg.to_dict(), "data": data_d, "kinds": kinds, "seeds": seeds}
    write_manifest(_manifest_path(out, False), "compare", args.argv, resolved, seeds[0])
    rows = compare_poolings(net, kinds, train_data, test_data, tcfg, h, seeds=seeds, log=log)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(rows_to_csv(rows))
    summary = summarize(rows)
    out.with_name(out.stem + ".summary.json").write_text(json.dumps({"median_test_mse": summary}, indent=1))
    for kind, v in summary.items():
        print(f"{kind:<18} median test MSE {v:.6f}")
    return EXIT_OK


# ----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(json.dumps({"error": "usage", "message": message}) + "\n")
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help=f"run seed (default: ${SEED_ENV} or 0)")
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS/OpenMP threads")
    common.add_argument("--log", default=None, help="JSON-lines event log file (default: stderr)")
    common.add_argument("--quiet", action="store_true", help="suppress progress events")

    p = _Parser(prog="spherelift", description="Lifting-based spherical wavelets and networks.")
    p.add_argument("--version", action="version", version=f"spherelift {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("mesh", parents=[common], help="build an icosphere hierarchy file")
    s.add_argument("--max-level", type=int, required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("gen", parents=[common], help="generate synthetic signals")
    s.add_argument("--spec", required=True, help="SyntheticSpec as JSON text or file")
    s.add_argument("--mesh", default=None)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("project", parents=[common], help="project IDX images onto the sphere")
    s.add_argument("--idx", required=True)
    s.add_argument("--labels", default=None)
    s.add_argument("--level", type=int, required=True)
    s.add_argument("--mesh", default=None)
    s.add_argument("--limit", type=int, default=None)
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("transform", parents=[common], help="one level of forward/backward lifting")
    s.add_argument("--mesh", default=None)
    s.add_argument("--signal", required=True)
    s.add_argument("--ops", nargs="+", default=["handcrafted"], metavar="KIND",
                   help="'handcrafted' or 'checkpoint PATH'")
    s.add_argument("--direction", choices=("forward", "backward"), required=True)
    s.add_argument("--features", default=None, help="signal the adaptive operators were computed from")
    s.add_argument("--out", required=True)

    s = sub.add_parser("check", parents=[common], help="run the wavelet property battery")
    s.add_argument("--mesh", default=None)
    s.add_argument("--level", type=int, default=None)
    s.add_argument("--no-gradients", action="store_true")

    s = sub.add_parser("train", parents=[common], help="train a network")
    s.add_argument("--task", choices=("recon", "cls", "reconstruction", "classification"), default=None)
    s.add_argument("--config", default=None, help="JSON text or file with network/train/data sections")
    s.add_argument("--data", default=None, help="signal directory (default: synthetic band-limited set)")
    s.add_argument("--mesh", default=None)
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--mesh", default=None)
    s.add_argument("--out", default=None)

    s = sub.add_parser("compare", parents=[common], help="compare pooling kinds on desk-scale reconstruction")
    s.add_argument("--kinds", default="downsample,lift_handcrafted,lift_adaptive")
    s.add_argument("--config", default=None)
    s.add_argument("--seeds", default=None, help="comma-separated seeds (default: seed, seed+1, seed+2)")
    s.add_argument("--mesh", default=None)
    s.add_argument("--out", required=True, help="results CSV")
    return p


COMMANDS = {"mesh": cmd_mesh, "gen": cmd_gen, "project": cmd_project, "transform": cmd_transform,
            "check": cmd_check, "train": cmd_train, "eval": cmd_eval, "compare": cmd_compare}


def dispatch(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    args.argv = argv
    stream = None
    try:
        if args.seed is None:
            args.seed = _default_seed()
        if args.threads is not None and args.threads < 1:
            raise config_error("--threads must be >= 1")
        if args.quiet:
            log = lambda event: None  # noqa: E731
        elif args.log:
            stream = open(args.log, "a")
            log = EventLog(stream)
        else:
            log = EventLog(sys.stderr)
        limits = threadpool_limits(args.threads) if args.threads else nullcontext()
        with limits:
            return COMMANDS[args.command](args, log)
    except CLIError as e:
        err = {"error": e.kind, "message": str(e)}
        code = e.code
    except (FormatError, IDXError) as e:
        err, code = {"error": "data", "message": str(e)}, EXIT_DATA
    except FileNotFoundError as e:
        err, code = {"error": "data", "message": str(e)}, EXIT_DATA
    finally:
        if stream is not None:
            stream.close()
    sys.stderr.write(json.dumps(err) + "\n")
    return code


def main() -> None:
    sys.exit(dispatch())

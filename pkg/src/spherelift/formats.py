"""On-disk formats: mesh and signal containers, checkpoint directories.

Mesh and signal files share one container layout::

    magic        8 bytes   b"SPHLMESH" or b"SPHLSIGN"
    header_len   uint32, little-endian
    header       UTF-8 JSON, header_len bytes
    payload      little-endian binary sections described by the header

Mesh payload, per level in order: coordinates as (nodes, 3) float64, then
edges as (edges, 2) uint32.  Signal payload: one (nodes, channels) float64
matrix, row-major.

A checkpoint is a directory holding ``manifest.json`` and one raw
little-endian float64 blob per parameter under ``params/``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .attention import ROLES, AttentionParams, RoleParams
from .icosphere import IcosphereHierarchy, from_arrays
from .lifting import SphericalSignal

FORMAT_VERSION = 1
MESH_MAGIC = b"SPHLMESH"
SIGNAL_MAGIC = b"SPHLSIGN"
MANIFEST = "manifest.json"


class FormatError(ValueError):
    """Malformed or inconsistent file contents."""


def _write_container(path, magic: bytes, header: dict, sections) -> None:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        for arr in sections:
            f.write(np.ascontiguousarray(arr).tobytes())


def _read_container(path, magic: bytes) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if data[:8] != magic:
        raise FormatError(f"{path}: not a {magic.decode()} file")
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header")
    (n,) = struct.unpack("<I", data[8:12])
    if len(data) < 12 + n:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[12:12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: bad header: {e}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {header.get('format_version')!r}")
    return header, data[12 + n:]


class _Reader:
    def __init__(self, payload: bytes, path):
        self.buf, self.pos, self.path = payload, 0, path

    def take(self, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
        dt = np.dtype(dtype)
        size = int(np.prod(shape)) * dt.itemsize
        if self.pos + size > len(self.buf):
            raise FormatError(f"{self.path}: truncated payload")
        arr = np.frombuffer(self.buf, dtype=dt, count=int(np.prod(shape)), offset=self.pos).reshape(shape)
        self.pos += size
        return arr

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{self.path}: {len(self.buf) - self.pos} trailing bytes")


# ----------------------------------------------------------------------
# meshes


def save_mesh(path, h: IcosphereHierarchy) -> None:
    levels = [{"level": l, "nodes": int(len(h.coords[l])), "edges": int(len(h.edges[l]))}
              for l in range(h.max_level + 1)]
    header = {"kind": "mesh", "format_version": FORMAT_VERSION, "max_level": h.max_level, "levels": levels}
    sections = []
    for l in range(h.max_level + 1):
        sections.append(np.asarray(h.coords[l], dtype="<f8"))
        sections.append(np.asarray(h.edges[l], dtype="<u4"))
    _write_container(path, MESH_MAGIC, header, sections)


def load_mesh(path) -> IcosphereHierarchy:
    header, payload = _read_container(path, MESH_MAGIC)
    rd = _Reader(payload, path)
    coords, edges = [], []
    try:
        levels = sorted(header["levels"], key=lambda d: d["level"])
        if [d["level"] for d in levels] != list(range(header["max_level"] + 1)):
            raise FormatError(f"{path}: level list does not cover 0..{header['max_level']}")
        for d in levels:
            coords.append(rd.take("<f8", (d["nodes"], 3)).astype(np.float64))
            edges.append(rd.take("<u4", (d["edges"], 2)).astype(np.int64))
    except (KeyError, TypeError) as e:
        raise FormatError(f"{path}: bad mesh header: {e}") from None
    rd.done()
    for l, e in enumerate(edges):
        if len(e) and e.max() >= len(coords[l]):
            raise FormatError(f"{path}: level {l} edge index out of range")
    return from_arrays(coords, edges)


# ----------------------------------------------------------------------
# signals


def save_signal(path, sig: SphericalSignal) -> None:
    v = np.asarray(sig.values, dtype="<f8")
    header = {"kind": "signal", "format_version": FORMAT_VERSION, "level": sig.level,
              "nodes": int(v.shape[0]), "channels": int(v.shape[1])}
    _write_container(path, SIGNAL_MAGIC, header, [v])


def load_signal(path) -> SphericalSignal:
    header, payload = _read_container(path, SIGNAL_MAGIC)
    try:
        level, nodes, channels = int(header["level"]), int(header["nodes"]), int(header["channels"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: bad signal header: {e}") from None
    rd = _Reader(payload, path)
    values = rd.take("<f8", (nodes, channels)).astype(np.float64)
    rd.done()
    try:
        return SphericalSignal(level, values)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None


def save_signals(directory, signals, labels=None, prefix: str = "signal") -> list[Path]:
    """Write numbered signal files plus an optional ``labels.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(signals):
        p = d / f"{prefix}_{i:05d}.sig"
        save_signal(p, s)
        paths.append(p)
    if labels is not None:
        (d / "labels.json").write_text(json.dumps([int(v) for v in labels]))
    return paths


def load_signals(directory) -> tuple[np.ndarray, int, list[int] | None]:
    """Stack every ``*.sig`` file of a directory (sorted by name): (values, level, labels)."""
    d = Path(directory)
    if not d.is_dir():
        raise FormatError(f"{d}: not a directory")
    files = sorted(d.glob("*.sig"))
    if not files:
        raise FormatError(f"{d}: no signal files")
    sigs = [load_signal(p) for p in files]
    if len({(s.level, s.values.shape) for s in sigs}) != 1:
        raise FormatError(f"{d}: signals differ in level or shape")
    labels = None
    lab_path = d / "labels.json"
    if lab_path.exists():
        labels = json.loads(lab_path.read_text())
        if not isinstance(labels, list) or len(labels) != len(sigs):
            raise FormatError(f"{lab_path}: expected {len(sigs)} labels")
    return np.stack([s.values for s in sigs]), sigs[0].level, labels


# ----------------------------------------------------------------------
# checkpoints


def _attention_meta(params: dict[str, np.ndarray], alpha: float, share_roles: bool) -> dict:
    dims = {}
    for name, v in params.items():
        parts = name.split(".")
        if parts[0] == "attn" and parts[-1] == "W0":
            dims[parts[1][1:]] = list(v.shape)
    return {"levels": sorted(int(l) for l in dims), "dims": dims, "share_roles": share_roles, "alpha": alpha}


def save_checkpoint(directory, params: dict[str, np.ndarray], *, network: dict | None = None,
                    train: dict | None = None, epoch: int = 0, alpha: float = 0.2,
                    share_roles: bool = False) -> Path:
    d = Path(directory)
    (d / "params").mkdir(parents=True, exist_ok=True)
    entries = {}
    for name in sorted(params):
        v = np.asarray(params[name])
        fname = f"params/{name}.bin"
        (d / fname).write_bytes(np.ascontiguousarray(v, dtype="<f8").tobytes())
        entries[name] = {"file": fname, "shape": list(v.shape)}
    manifest = {
        "kind": "checkpoint", "format_version": FORMAT_VERSION, "epoch": epoch,
        "network": network, "train": train, "params": entries,
        "attention": _attention_meta(params, alpha, share_roles),
    }
    (d / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return d


def load_checkpoint(directory) -> tuple[dict, dict[str, np.ndarray]]:
    """(manifest, params as float64 arrays)."""
    d = Path(directory)
    mpath = d / MANIFEST
    if not mpath.exists():
        raise FormatError(f"{d}: no {MANIFEST}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{mpath}: {e}") from None
    if manifest.get("kind") != "checkpoint" or manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{mpath}: not a version-{FORMAT_VERSION} checkpoint")
    params = {}
    for name, e in manifest.get("params", {}).items():
        shape = tuple(e["shape"])
        blob = d / e["file"]
        if not blob.exists():
            raise FormatError(f"{blob}: missing parameter blob")
        raw = blob.read_bytes()
        if len(raw) != 8 * int(np.prod(shape)):
            raise FormatError(f"{blob}: size does not match shape {list(shape)}")
        params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return manifest, params


def attention_from_params(params: dict[str, np.ndarray], alpha: float = 0.2,
                          share_roles: bool = False) -> AttentionParams:
    """Collect ``attn.L{level}.{role}.{W0,w1,w2}`` entries into :class:`AttentionParams`."""
    roles: dict[int, dict[str, RoleParams]] = {}
    levels = sorted({int(n.split(".")[1][1:]) for n in params if n.startswith("attn.")})
    names = ("update",) if share_roles else ROLES
    for level in levels:
        roles[level] = {}
        for role in names:
            key = f"attn.L{level}.{role}"
            try:
                roles[level][role] = RoleParams(params[f"{key}.W0"], params[f"{key}.w1"], params[f"{key}.w2"])
            except KeyError as e:
                raise FormatError(f"missing attention parameter {e.args[0]}") from None
    return AttentionParams(roles, alpha, share_roles)


def params_from_attention(ap: AttentionParams) -> dict[str, np.ndarray]:
    out = {}
    for level, per in ap.roles.items():
        for role, rp in per.items():
            for k, v in rp.arrays().items():
                out[f"attn.L{level}.{role}.{k}"] = v
    return out


def save_attention(directory, ap: AttentionParams) -> Path:
    return save_checkpoint(directory, params_from_attention(ap), alpha=ap.alpha, share_roles=ap.share_roles)


def load_attention(directory) -> AttentionParams:
    manifest, params = load_checkpoint(directory)
    meta = manifest.get("attention") or {}
    return attention_from_params(params, meta.get("alpha", 0.2), bool(meta.get("share_roles", False)))

"""Spherical test signals: constants, noise, band-limited harmonics, projected images.

Also reads and writes IDX files (the MNIST container format).
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import sph_harm_y

from .icosphere import IcosphereHierarchy
from .lifting import SphericalSignal

KINDS = ("constant", "bandlimited", "noise")


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "bandlimited"
    level: int = 3
    channels: int = 1
    band_limit: int = 8
    amplitude: float = 1.0
    seed: int = 0

    def validate(self, h: IcosphereHierarchy | None = None) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown signal kind {self.kind!r}; expected one of {KINDS}")
        if self.band_limit < 0:
            raise ValueError("band_limit must be >= 0")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.level < 0 or (h is not None and self.level > h.max_level):
            raise ValueError(f"level {self.level} not available in the mesh")


def real_sph_harm(degree: int, order: int, xyz: np.ndarray) -> np.ndarray:
    """Orthonormal real spherical harmonic of the given degree/order at unit vectors."""
    if abs(order) > degree:
        raise ValueError("|order| must not exceed degree")
    xyz = np.asarray(xyz, dtype=np.float64)
    theta = np.arccos(np.clip(xyz[..., 2], -1.0, 1.0))
    phi = np.arctan2(xyz[..., 1], xyz[..., 0])
    if order == 0:
        return sph_harm_y(degree, 0, theta, phi).real
    y = sph_harm_y(degree, abs(order), theta, phi)
    sign = -1.0 if abs(order) % 2 else 1.0
    part = y.imag if order < 0 else y.real
    return math.sqrt(2.0) * sign * part


def harmonic_basis(band_limit: int, xyz: np.ndarray) -> np.ndarray:
    """(nodes, (band_limit+1)^2) matrix of all real harmonics up to ``band_limit``."""
    cols = [real_sph_harm(l, m, xyz) for l in range(band_limit + 1) for m in range(-l, l + 1)]
    return np.stack(cols, axis=-1)


def _minmax(v: np.ndarray) -> np.ndarray:
    lo, hi = v.min(axis=0, keepdims=True), v.max(axis=0, keepdims=True)
    span = hi - lo
    flat = span <= 1e-12 * np.maximum(1.0, np.abs(hi))
    return np.where(flat, 1.0, (v - lo) / np.where(flat, 1.0, span))


def generate(spec: SyntheticSpec, h: IcosphereHierarchy) -> SphericalSignal:
    """Deterministic synthetic signal with values in ``[0, amplitude]``.

    Band-limited signals are Gaussian combinations of real harmonics up to
    ``band_limit``, min-max scaled per channel; a flat channel maps to
    ``amplitude``.
    """
    spec.validate(h)
    n = h.num_nodes(spec.level)
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "constant":
        v = np.full((n, spec.channels), float(spec.amplitude))
    elif spec.kind == "noise":
        v = spec.amplitude * rng.random((n, spec.channels))
    else:
        basis = harmonic_basis(spec.band_limit, h.coords[spec.level])
        coef = rng.normal(size=(basis.shape[1], spec.channels))
        v = spec.amplitude * _minmax(basis @ coef)
    return SphericalSignal(spec.level, v)


def generate_dataset(spec: SyntheticSpec, h: IcosphereHierarchy, count: int) -> np.ndarray:
    """(count, nodes, channels) array; item ``i`` uses seed ``spec.seed + i``."""
    if spec.kind == "bandlimited":
        # one basis evaluation for the whole set
        spec.validate(h)
        basis = harmonic_basis(spec.band_limit, h.coords[spec.level])
        out = np.empty((count, basis.shape[0], spec.channels))
        for i in range(count):
            coef = np.random.default_rng(spec.seed + i).normal(size=(basis.shape[1], spec.channels))
            out[i] = spec.amplitude * _minmax(basis @ coef)
        return out
    return np.stack([
        generate(SyntheticSpec(spec.kind, spec.level, spec.channels, spec.band_limit, spec.amplitude,
                               spec.seed + i), h).values
        for i in range(count)
    ])


# ----------------------------------------------------------------------
# planar images

# half-width of the square tangent-plane window; chosen so the window covers 1/5 of the sphere
# (solid angle of a centred square of half-width a is 4*asin(a^2 / (1 + a^2)))
FOOTPRINT_HALF_WIDTH = math.sqrt(math.sin(math.pi / 5) / (1.0 - math.sin(math.pi / 5)))


def _normalize_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.size == 0 or img.ndim not in (2, 3) or 0 in img.shape[:2]:
        raise ValueError("image must be a nonempty HxW or HxWxC grid")
    if img.ndim == 2:
        img = img[:, :, None]
    if np.issubdtype(img.dtype, np.integer):
        return img.astype(np.float64) / float(np.iinfo(img.dtype).max)
    return np.clip(img.astype(np.float64), 0.0, 1.0)


def gnomonic(xyz: np.ndarray, half_width: float = FOOTPRINT_HALF_WIDTH):
    """Tangent-plane coordinates at (0, 0, 1) and the inside-footprint mask."""
    z = xyz[:, 2]
    front = z > 0
    safe = np.where(front, z, 1.0)
    u, v = xyz[:, 0] / safe, xyz[:, 1] / safe
    inside = front & (np.abs(u) <= half_width) & (np.abs(v) <= half_width)
    return u, v, inside


def project_image(img, h: IcosphereHierarchy, level: int,
                  half_width: float = FOOTPRINT_HALF_WIDTH) -> SphericalSignal:
    """Paste a planar image onto the sphere by nearest-pixel gnomonic sampling.

    Row 0 of the image is the top (largest tangent ``v``).  Nodes outside the
    footprint get 0.
    """
    im = _normalize_image(img)
    rows, cols, ch = im.shape
    u, v, inside = gnomonic(h.coords[level], half_width)
    c = np.clip(np.floor((u + half_width) / (2 * half_width) * cols), 0, cols - 1).astype(np.int64)
    r = np.clip(np.floor((half_width - v) / (2 * half_width) * rows), 0, rows - 1).astype(np.int64)
    out = np.zeros((len(u), ch))
    out[inside] = im[r[inside], c[inside]]
    return SphericalSignal(level, out)


# ----------------------------------------------------------------------
# IDX files

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class IDXError(ValueError):
    pass


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an unsigned-byte IDX file (images: (n, rows, cols), labels: (n,))."""
    with _open(path) as f:
        data = f.read()
    if len(data) < 4:
        raise IDXError(f"{path}: truncated header")
    magic = struct.unpack(">I", data[:4])[0]
    if magic == IDX_IMAGES:
        ndim = 3
    elif magic == IDX_LABELS:
        ndim = 1
    else:
        raise IDXError(f"{path}: bad magic number 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IDXError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    need = int(np.prod(dims))
    if len(data) - header < need:
        raise IDXError(f"{path}: truncated payload ({len(data) - header} of {need} bytes)")
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=header).reshape(dims).copy()


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValueError("only unsigned-byte IDX files are supported")
    if arr.ndim == 3:
        magic = IDX_IMAGES
    elif arr.ndim == 1:
        magic = IDX_LABELS
    else:
        raise ValueError("IDX arrays must be (n, rows, cols) images or (n,) labels")
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        f.write(np.ascontiguousarray(arr).tobytes())


def load_idx(images_path, labels_path=None) -> tuple[list[np.ndarray], list[int] | None]:
    images = read_idx(images_path)
    if images.ndim != 3:
        raise IDXError(f"{images_path}: expected an image file")
    labels = None
    if labels_path is not None:
        lab = read_idx(labels_path)
        if lab.ndim != 1 or len(lab) != len(images):
            raise IDXError("label file does not match image count")
        labels = [int(v) for v in lab]
    return list(images), labels

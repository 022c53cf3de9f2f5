"""Icosahedral subdivision hierarchy of the unit sphere.

Level ``l`` has ``10 * 4**l + 2`` nodes.  Indices ``0 .. n_{l-1}-1`` at level
``l`` are the nodes of level ``l-1`` (the even partition); the remaining
indices are edge midpoints (the odd partition), ordered lexicographically by
their (min, max) parent pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .sparse import Pattern

MAX_LEVEL = 8


def num_nodes(level: int) -> int:
    return 10 * 4**level + 2


def num_odd(level: int) -> int:
    """Number of odd nodes n_l inserted at ``level`` (``level >= 1``)."""
    return num_nodes(level) - num_nodes(level - 1)


def _base_icosahedron() -> tuple[np.ndarray, np.ndarray]:
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = []
    # cyclic permutations of (±1, ±phi, 0)
    for s1 in (-1.0, 1.0):
        for s2 in (-1.0, 1.0):
            verts.append((s1, s2 * phi, 0.0))
    for s1 in (-1.0, 1.0):
        for s2 in (-1.0, 1.0):
            verts.append((0.0, s1, s2 * phi))
    for s1 in (-1.0, 1.0):
        for s2 in (-1.0, 1.0):
            verts.append((s2 * phi, 0.0, s1))
    v = np.array(verts, dtype=np.float64)
    # edge length 2 before normalization
    d2 = ((v[:, None, :] - v[None, :, :]) ** 2).sum(-1)
    adj = np.isclose(d2, 4.0)
    faces = []
    for a in range(12):
        for b in range(a + 1, 12):
            if not adj[a, b]:
                continue
            for c in range(b + 1, 12):
                if adj[a, c] and adj[b, c]:
                    faces.append((a, b, c))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v, np.array(faces, dtype=np.int64)


def _edges_from_faces(faces: np.ndarray) -> np.ndarray:
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [0, 2]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def _subdivide(coords, faces, edges):
    n = len(coords)
    keys = edges[:, 0] * n + edges[:, 1]  # lexicographically sorted already
    mid = coords[edges[:, 0]] + coords[edges[:, 1]]
    mid /= np.linalg.norm(mid, axis=1, keepdims=True)
    new_coords = np.concatenate([coords, mid])

    def midpoint(a, b):
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        return n + np.searchsorted(keys, lo * n + hi)

    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
    new_faces = np.concatenate([
        np.stack([a, ab, ca], 1),
        np.stack([b, bc, ab], 1),
        np.stack([c, ca, bc], 1),
        np.stack([ab, bc, ca], 1),
    ])
    new_faces.sort(axis=1)
    return new_coords, new_faces, _edges_from_faces(new_faces), edges.copy()


@dataclass(frozen=True, eq=False)
class BlockAdjacency:
    """Even/odd blocks of a level adjacency: ``A = [[E, M], [N, O]]``."""

    level: int
    E: sp.csr_matrix
    M: sp.csr_matrix
    N: sp.csr_matrix
    O: sp.csr_matrix

    @property
    def n_even(self) -> int:
        return self.M.shape[0]

    @property
    def n_odd(self) -> int:
        return self.M.shape[1]

    @cached_property
    def update_pattern(self) -> Pattern:
        return Pattern.from_csr(self.M)

    @cached_property
    def predict_pattern(self) -> Pattern:
        return Pattern.from_csr(self.N)


@dataclass(frozen=True, eq=False)
class IcosphereHierarchy:
    max_level: int
    coords: tuple[np.ndarray, ...]
    edges: tuple[np.ndarray, ...]
    # parent_edge[l] is (n_l, 2) for l >= 1; parent_edge[0] is empty
    parent_edge: tuple[np.ndarray, ...]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def num_nodes(self, level: int) -> int:
        return len(self.coords[level])

    def _check_level(self, level: int, lo: int = 0) -> None:
        if not lo <= level <= self.max_level:
            raise ValueError(f"level {level} outside [{lo}, {self.max_level}]")

    def adjacency(self, level: int) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency of ``level`` in CSR form with sorted indices."""
        self._check_level(level)
        key = ("A", level)
        if key not in self._cache:
            n = self.num_nodes(level)
            e = self.edges[level]
            rows = np.concatenate([e[:, 0], e[:, 1]])
            cols = np.concatenate([e[:, 1], e[:, 0]])
            a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
            a.sum_duplicates()
            a.sort_indices()
            self._cache[key] = a
        return self._cache[key]

    def degrees(self, level: int) -> np.ndarray:
        return np.diff(self.adjacency(level).indptr)

    def blocks(self, level: int) -> BlockAdjacency:
        self._check_level(level, lo=1)
        key = ("B", level)
        if key not in self._cache:
            self._cache[key] = split_adjacency(self, level)
        return self._cache[key]

    def hops(self, level: int, source: int, max_hops: int) -> np.ndarray:
        """Hop distance from ``source`` to every node, capped at ``max_hops + 1``."""
        a = self.adjacency(level)
        dist = np.full(self.num_nodes(level), max_hops + 1, dtype=np.int64)
        dist[source] = 0
        frontier = np.array([source])
        for h in range(1, max_hops + 1):
            nbrs = np.unique(np.concatenate([a.indices[a.indptr[i]:a.indptr[i + 1]] for i in frontier]))
            nbrs = nbrs[dist[nbrs] > h]
            dist[nbrs] = h
            frontier = nbrs
            if len(frontier) == 0:
                break
        return dist


def build_hierarchy(max_level: int) -> IcosphereHierarchy:
    if not isinstance(max_level, (int, np.integer)) or not 0 <= max_level <= MAX_LEVEL:
        raise ValueError(f"max_level must be an integer in [0, {MAX_LEVEL}], got {max_level!r}")
    coords, faces = _base_icosahedron()
    edges = _edges_from_faces(faces)
    all_coords, all_edges = [coords], [edges]
    parents = [np.zeros((0, 2), dtype=np.int64)]
    for _ in range(max_level):
        coords, faces, edges, parent = _subdivide(coords, faces, edges)
        all_coords.append(coords)
        all_edges.append(edges)
        parents.append(parent)
    for arr in all_coords + all_edges + parents:
        arr.setflags(write=False)
    return IcosphereHierarchy(int(max_level), tuple(all_coords), tuple(all_edges), tuple(parents))


def split_adjacency(h: IcosphereHierarchy, level: int) -> BlockAdjacency:
    """Partition the level adjacency into even/odd blocks (E, M, N, O)."""
    if not 1 <= level <= h.max_level:
        raise ValueError(f"level must be in [1, {h.max_level}], got {level}")
    a = h.adjacency(level)
    ne = h.num_nodes(level - 1)
    E = a[:ne, :ne].tocsr()
    M = a[:ne, ne:].tocsr()
    N = a[ne:, :ne].tocsr()
    O = a[ne:, ne:].tocsr()
    for blk in (E, M, N, O):
        blk.sort_indices()
    # the inherent subdivision graph never links two coarse nodes directly
    if E.nnz:
        raise ValueError(f"level {level}: even-even block has {E.nnz} entries; expected none")
    return BlockAdjacency(level, E, M, N, O)


def from_arrays(coords: list[np.ndarray], edges: list[np.ndarray]) -> IcosphereHierarchy:
    """Rebuild a hierarchy from per-level coordinates and edges (e.g. a loaded mesh file).

    Parent edges are recovered as each odd node's neighbors in the even range.
    """
    parents = [np.zeros((0, 2), dtype=np.int64)]
    for level in range(1, len(coords)):
        ne = len(coords[level - 1])
        e = np.asarray(edges[level], dtype=np.int64)
        cross = e[(e[:, 0] < ne) & (e[:, 1] >= ne)]
        order = np.lexsort((cross[:, 0], cross[:, 1]))
        cross = cross[order]
        n_odd = len(coords[level]) - ne
        par = np.full((n_odd, 2), -1, dtype=np.int64)
        counts = np.bincount(cross[:, 1] - ne, minlength=n_odd)
        if np.all(counts == 2):
            par = cross[:, 0].reshape(n_odd, 2)
        parents.append(par)
    return IcosphereHierarchy(
        len(coords) - 1,
        tuple(np.asarray(c, dtype=np.float64) for c in coords),
        tuple(np.asarray(e, dtype=np.int64) for e in edges),
        tuple(parents),
    )


@dataclass
class CheckResult:
    name: str
    passed: bool
    first_index: int | None = None
    detail: str = ""


def validate_hierarchy(h: IcosphereHierarchy) -> list[CheckResult]:
    """Run every structural invariant; report pass/fail with the first offending index."""
    out: list[CheckResult] = []

    def record(name, bad_idx, detail=""):
        bad_idx = np.asarray(bad_idx).ravel()
        first = int(bad_idx[0]) if bad_idx.size else None
        out.append(CheckResult(name, first is None, first, detail if first is not None else ""))

    for level in range(h.max_level + 1):
        n = h.num_nodes(level)
        expected = num_nodes(level)
        out.append(CheckResult(f"L{level}.node_count", n == expected, None if n == expected else level,
                               "" if n == expected else f"{n} != {expected}"))
        norms = np.linalg.norm(h.coords[level], axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-12)
        record(f"L{level}.unit_norm", bad, f"|x|={norms[bad[0]]:.6g}" if bad.size else "")

        deg = np.bincount(h.edges[level].ravel(), minlength=n)
        n5 = int((deg == 5).sum())
        bad = np.flatnonzero((deg != 5) & (deg != 6))
        if bad.size == 0 and n5 != 12:
            bad = np.flatnonzero(deg == 5)[12:] if n5 > 12 else np.flatnonzero(deg == 6)[:1]
        record(f"L{level}.degree", bad, f"degree 5 count {n5}, first bad degree "
               f"{deg[bad[0]] if bad.size else ''}")

        if level == 0:
            continue
        ne = h.num_nodes(level - 1)
        prefix_err = np.abs(h.coords[level][:ne] - h.coords[level - 1]).max(axis=1)
        record(f"L{level}.even_prefix", np.flatnonzero(prefix_err > 0))

        e = h.edges[level]
        even_even = e[(e[:, 0] < ne) & (e[:, 1] < ne)]
        record(f"L{level}.even_block_empty", even_even[:, 0] if len(even_even) else [])

        cross = e[(e[:, 0] < ne) & (e[:, 1] >= ne)]
        cnt = np.bincount(cross[:, 1] - ne, minlength=n - ne)
        record(f"L{level}.odd_two_parents", ne + np.flatnonzero(cnt != 2))

        par = h.parent_edge[level]
        expected_par = h.edges[level - 1]
        if par.shape == expected_par.shape:
            bad = np.flatnonzero((par != expected_par).any(axis=1))
        else:
            bad = np.arange(max(len(par), 1))
        record(f"L{level}.parent_order", ne + bad)
    return out

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spherelift.icosphere import (build_hierarchy, from_arrays, num_nodes, split_adjacency,
                                  validate_hierarchy)


def test_node_counts(h4):
    assert [h4.num_nodes(l) for l in range(5)] == [12, 42, 162, 642, 2562]
    for l in range(5):
        assert num_nodes(l) == 10 * 4**l + 2


def test_odd_count_equals_previous_edge_count(h4):
    for l in range(1, 5):
        assert h4.num_nodes(l) - h4.num_nodes(l - 1) == len(h4.edges[l - 1]) == 30 * 4 ** (l - 1)


def test_base_is_golden_ratio_icosahedron(h3):
    phi = (1 + 5**0.5) / 2
    c = h3.coords[0] * np.sqrt(1 + phi**2)
    for row in c:
        assert sorted(np.round(np.abs(row), 12)) == sorted(np.round([0.0, 1.0, phi], 12))


def test_level1_blocks(h3):
    adj = split_adjacency(h3, 1)
    assert adj.M.shape == (12, 30) and adj.M.nnz == 60
    assert adj.E.nnz == 0
    assert np.all(np.asarray(adj.N.sum(axis=1)).ravel() == 2)


def test_level2_update_nnz(h3):
    adj = split_adjacency(h3, 2)
    assert adj.M.nnz == 2 * 120 == 240
    assert adj.M.sum() == adj.N.sum() == 240


def test_update_rows_have_five_or_six_entries(h4):
    for l in range(1, 5):
        counts = np.diff(h4.blocks(l).M.indptr)
        assert set(counts.tolist()) <= {5, 6}
        assert int((counts == 5).sum()) == 12


def test_blocks_partition_adjacency(h3):
    for l in range(1, 4):
        adj = h3.blocks(l)
        a = h3.adjacency(l).toarray()
        ne = adj.n_even
        assert np.array_equal(a[:ne, :ne], adj.E.toarray())
        assert np.array_equal(a[:ne, ne:], adj.M.toarray())
        assert np.array_equal(a[ne:, :ne], adj.N.toarray())
        assert np.array_equal(a[ne:, ne:], adj.O.toarray())
        assert np.array_equal(adj.M.toarray(), adj.N.toarray().T)


def test_odd_nodes_are_sorted_midpoints(h3):
    for l in range(1, 4):
        par = h3.parent_edge[l]
        assert np.all(par[:, 0] < par[:, 1])
        keys = par[:, 0] * 10**6 + par[:, 1]
        assert np.all(np.diff(keys) > 0)
        mid = h3.coords[l - 1][par].sum(axis=1)
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        assert np.allclose(h3.coords[l][h3.num_nodes(l - 1):], mid, atol=1e-15)


def test_odd_nodes_equidistant_from_parents(h4):
    for l in range(1, 5):
        c = h4.coords[l]
        par = h4.parent_edge[l]
        odd = c[h4.num_nodes(l - 1):]
        d0 = np.arccos(np.clip((odd * c[par[:, 0]]).sum(1), -1, 1))
        d1 = np.arccos(np.clip((odd * c[par[:, 1]]).sum(1), -1, 1))
        assert np.max(np.abs(d0 - d1)) < 1e-9


def test_deterministic():
    a, b = build_hierarchy(3), build_hierarchy(3)
    for l in range(4):
        assert a.coords[l].tobytes() == b.coords[l].tobytes()
        assert a.edges[l].tobytes() == b.edges[l].tobytes()


def test_immutable(h3):
    with pytest.raises(ValueError):
        h3.coords[1][0, 0] = 2.0
    with pytest.raises(dataclasses.FrozenInstanceError):
        h3.max_level = 5


@pytest.mark.parametrize("bad", [-1, 9, 2.5])
def test_build_rejects_bad_level(bad):
    with pytest.raises(ValueError):
        build_hierarchy(bad)


def test_split_rejects_level0(h3):
    with pytest.raises(ValueError):
        split_adjacency(h3, 0)


def test_validate_pristine(h3):
    res = validate_hierarchy(h3)
    assert all(r.passed for r in res)


def _copy(h):
    return [c.copy() for c in h.coords], [e.copy() for e in h.edges]


def test_validate_scaled_coordinate(h3):
    coords, edges = _copy(h3)
    coords[3][77] *= 1.1
    res = {r.name: r for r in validate_hierarchy(from_arrays(coords, edges))}
    assert not res["L3.unit_norm"].passed
    assert res["L3.unit_norm"].first_index == 77


def test_validate_removed_edge(h3):
    coords, edges = _copy(h3)
    edges[2] = np.delete(edges[2], 10, axis=0)
    res = {r.name: r for r in validate_hierarchy(from_arrays(coords, edges))}
    assert not res["L2.degree"].passed


def test_from_arrays_round_trip(h3):
    coords, edges = _copy(h3)
    h = from_arrays(coords, edges)
    for l in range(1, 4):
        assert np.array_equal(h.parent_edge[l], h3.parent_edge[l])
        assert (h.blocks(l).M != h3.blocks(l).M).nnz == 0


@settings(max_examples=25, deadline=None)
@given(level=st.integers(1, 3), source=st.integers(0, 10**6))
def test_hops_match_matrix_powers(h3, level, source):
    n = h3.num_nodes(level)
    s = source % n
    dist = h3.hops(level, s, 2)
    a = (h3.adjacency(level) + 0).toarray() > 0
    one = a[s]
    two = (a.astype(int) @ a.astype(int))[s] > 0
    assert np.array_equal(dist == 1, one)
    assert np.array_equal(dist <= 2, one | two | (np.arange(n) == s))

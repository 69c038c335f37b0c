import numpy as np
import pytest

from geotok.errors import DomainError
from geotok.geodesic import (
    ALLOWED_VALUE, MASK_SENTINEL, build_mask, load_geodesics, save_geodesics, supernode_geodesics,
)
from geotok.mesh import EdgeGraph, edge_graph
from geotok.tokenize import Partitioning, build_partition


def floyd_warshall(eg):
    n = eg.n_vertices
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0.0)
    for (i, j), w in zip(eg.edges.tolist(), eg.lengths.tolist()):
        d[i, j] = d[j, i] = min(d[i, j], w)
    for k in range(n):
        d = np.minimum(d, d[:, k:k + 1] + d[k:k + 1, :])
    return d


def path_edge_graph(n):
    return EdgeGraph(np.column_stack([np.arange(n - 1), np.arange(1, n)]), np.ones(n - 1), n)


def test_unit_path_of_five_edges():
    eg = path_edge_graph(6)
    part = Partitioning(np.array([0, 5]), np.array([0, 0, 0, 1, 1, 1]))
    g = supernode_geodesics(eg, part)
    np.testing.assert_array_equal(g, [[0.0, 5.0], [5.0, 0.0]])


def test_matches_floyd_warshall(ico3):
    eg = edge_graph(ico3)
    part = build_partition(ico3, 24)
    g = supernode_geodesics(eg, part)
    oracle = floyd_warshall(eg)[np.ix_(part.roots, part.roots)]
    np.testing.assert_allclose(g, oracle, rtol=1e-12)
    np.testing.assert_array_equal(g, g.T)
    assert np.all(np.diag(g) == 0) and np.all(g[~np.eye(24, dtype=bool)] > 0)


def test_disconnected_components_are_infinite():
    eg = EdgeGraph(np.array([[0, 1], [2, 3]]), np.array([1.0, 2.0]), 4)
    part = Partitioning(np.array([0, 2]), np.array([0, 0, 1, 1]))
    g = supernode_geodesics(eg, part)
    assert np.isinf(g[0, 1]) and np.isinf(g[1, 0])


def test_root_out_of_range():
    part = Partitioning(np.array([0, 2]), np.array([0, 0, 1]))
    with pytest.raises(DomainError):
        supernode_geodesics(path_edge_graph(2), part)


# ---------------------------------------------------------------- masks


def test_infinite_radius_is_all_allowed():
    g = np.array([[0.0, 3.0], [3.0, 0.0]])
    np.testing.assert_array_equal(build_mask(g), np.full((2, 2), ALLOWED_VALUE))


def test_zero_radius_keeps_only_diagonal():
    g = np.array([[0.0, 1.0, 2.0], [1.0, 0.0, 1.0], [2.0, 1.0, 0.0]])
    m = build_mask(g, 0.0)
    np.testing.assert_array_equal(m, np.where(np.eye(3, dtype=bool), ALLOWED_VALUE, MASK_SENTINEL))


def test_radius_boundary_inclusive():
    g = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert build_mask(g, 1.0)[0, 1] == ALLOWED_VALUE
    assert build_mask(g, np.nextafter(1.0, 0.0))[0, 1] == MASK_SENTINEL


def test_median_radius_allows_about_half(ico3):
    part = build_partition(ico3, 40)
    g = supernode_geodesics(edge_graph(ico3), part)
    off = g[~np.eye(40, dtype=bool)]
    frac = (build_mask(g, np.median(off))[~np.eye(40, dtype=bool)] == ALLOWED_VALUE).mean()
    assert 0.45 <= frac <= 0.55


def test_allowed_count_monotone_in_radius(ico3):
    part = build_partition(ico3, 30)
    g = supernode_geodesics(edge_graph(ico3), part)
    counts = [(build_mask(g, r) == ALLOWED_VALUE).sum() for r in np.linspace(0, g.max(), 12)]
    assert np.all(np.diff(counts) >= 0)
    assert counts[0] == 30 and counts[-1] == 900


def test_custom_values_and_errors():
    g = np.array([[0.0, 2.0], [2.0, 0.0]])
    np.testing.assert_array_equal(build_mask(g, 1.0, allowed_value=1.0, sentinel=0.0), np.eye(2))
    with pytest.raises(DomainError):
        build_mask(g, -1.0)
    with pytest.raises(DomainError):
        build_mask(g, np.nan)
    with pytest.raises(DomainError):
        build_mask(np.zeros((2, 3)), 1.0)


# ---------------------------------------------------------------- cache


def test_cache_roundtrip_and_staleness(tmp_path, ico3):
    eg = edge_graph(ico3)
    part = build_partition(ico3, 16)
    g = supernode_geodesics(eg, part)
    save_geodesics(tmp_path / "g", g, part, "h1")
    np.testing.assert_array_equal(load_geodesics(tmp_path / "g", part, "h1"), g)
    assert load_geodesics(tmp_path / "g", part, "h2") is None
    other = build_partition(ico3, 16, seed=7, method="baseline")
    assert load_geodesics(tmp_path / "g", other, "h1") is None
    assert load_geodesics(tmp_path / "missing", part, "h1") is None


def test_cache_corruption_detected(tmp_path, ico3):
    part = build_partition(ico3, 8)
    g = supernode_geodesics(edge_graph(ico3), part)
    save_geodesics(tmp_path / "g", g, part, "h")
    blob = tmp_path / "g" / "geodesic.f64"
    blob.write_bytes(blob.read_bytes()[:-8])
    assert load_geodesics(tmp_path / "g", part, "h") is None

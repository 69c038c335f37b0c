import warnings

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import TETRA_OFF, random_sphere_mesh, tetrahedron
from geotok import shapes
from geotok.errors import DegenerateGeometryError, MeshFormatError, MeshValidationError
from geotok.mesh import COT_CLAMP, Mesh, cotan_laplacian, edge_graph, load_mesh, normalize_mesh, write_ply

# surface area of the icosahedron inscribed in the unit sphere: 20 * sqrt(3)/4 * a^2
# with edge a = 4 / sqrt(10 + 2 sqrt 5)
ICOSAHEDRON_AREA = 20 * np.sqrt(3) / 4 * (4 / np.sqrt(10 + 2 * np.sqrt(5))) ** 2


def test_icosahedron_area_oracle_value():
    assert ICOSAHEDRON_AREA == pytest.approx(9.5745413833, abs=1e-9)


# ---------------------------------------------------------------- loading


def test_load_tetrahedron_off(tmp_path):
    p = tmp_path / "t.off"
    p.write_text(TETRA_OFF)
    m = load_mesh(p)
    assert m.n_vertices == 4 and m.n_faces == 4


def test_obj_quad_fan_triangulated(tmp_path):
    p = tmp_path / "q.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    m = load_mesh(p)
    assert m.faces.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_obj_slash_tokens_and_negative_indices(tmp_path):
    p = tmp_path / "n.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nf -3/1/1 -2/1/1 -1/1/1\n")
    assert load_mesh(p).faces.tolist() == [[0, 1, 2]]


def test_out_of_range_index_is_validation_error(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 5\n")
    with pytest.raises(MeshValidationError):
        load_mesh(p)


def test_parse_error_names_line(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 0 zero\n")
    with pytest.raises(MeshFormatError, match=r"bad\.obj:2:"):
        load_mesh(p)


def test_ascii_ply_roundtrip(tmp_path):
    m = tetrahedron()
    p = tmp_path / "t.ply"
    write_ply(p, m, colors=np.full((4, 3), 200))
    back = load_mesh(p)
    np.testing.assert_allclose(back.vertices, m.vertices)
    np.testing.assert_array_equal(back.faces, m.faces)


def test_binary_ply_rejected(tmp_path):
    p = tmp_path / "b.ply"
    p.write_bytes(b"ply\nformat binary_little_endian 1.0\nelement vertex 3\nend_header\n\x00\xff\xfe")
    with pytest.raises(MeshFormatError, match="ASCII"):
        load_mesh(p)


def test_unknown_extension(tmp_path):
    p = tmp_path / "m.stl"
    p.write_text("solid")
    with pytest.raises(MeshFormatError):
        load_mesh(p)


@pytest.mark.parametrize("faces", [np.zeros((0, 3), int), np.array([[0, 1, 1]]), np.array([[0, 1, 3]])])
def test_mesh_invariants(faces):
    with pytest.raises(MeshValidationError):
        Mesh(np.eye(3), faces)


# ---------------------------------------------------------------- normalization


def test_normalize_offset_cube():
    m = shapes.box(2).transformed(np.eye(3), translation=(5, 5, 5))
    out = normalize_mesh(m)
    np.testing.assert_allclose(out.vertices.mean(axis=0), 0, atol=1e-9)
    assert np.linalg.norm(out.vertices, axis=1).max() == pytest.approx(1.0, abs=1e-9)


def test_normalize_idempotent_and_similarity_invariant():
    m = random_sphere_mesh(60, seed=1)
    once = normalize_mesh(m)
    np.testing.assert_allclose(normalize_mesh(once).vertices, once.vertices, atol=1e-9)
    np.testing.assert_allclose(normalize_mesh(m.transformed(np.eye(3), scale=10.0)).vertices, once.vertices,
                               atol=1e-9)
    R = Rotation.from_euler("xyz", [0.3, -1.1, 2.0]).as_matrix()
    moved = normalize_mesh(m.transformed(R, translation=(1, 2, 3), scale=0.2))
    np.testing.assert_allclose(moved.vertices, once.vertices @ R.T, atol=1e-9)


def test_normalize_degenerate():
    m = Mesh(np.ones((3, 3)), np.array([[0, 1, 2]]))
    with pytest.raises(DegenerateGeometryError):
        normalize_mesh(m)


# ---------------------------------------------------------------- operators


def test_icosahedron_mass_and_area():
    ops = cotan_laplacian(shapes.icosahedron())
    np.testing.assert_allclose(ops.mass, ops.mass[0], rtol=1e-12)
    assert ops.mass.sum() == pytest.approx(ICOSAHEDRON_AREA, rel=1e-12)


def test_equilateral_one_ring_symmetric_weights():
    ang = np.arange(6) * np.pi / 3
    v = np.vstack([[0, 0, 0], np.column_stack([np.cos(ang), np.sin(ang), np.zeros(6)])])
    f = np.array([[0, 1 + k, 1 + (k + 1) % 6] for k in range(6)])
    L = cotan_laplacian(Mesh(v, f)).L.toarray()
    np.testing.assert_allclose(L[0, 1:], L[0, 1], rtol=1e-12)
    # interior edge: two 60 degree angles, -(cot + cot)/2 = -1/sqrt(3)
    assert L[0, 1] == pytest.approx(-1 / np.sqrt(3), rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_laplacian_invariants(seed):
    m = normalize_mesh(random_sphere_mesh(80, seed))
    ops = cotan_laplacian(m)
    L = ops.L
    assert (L != L.T).nnz == 0
    norm = abs(L).sum(axis=1).max()
    assert np.abs(L @ np.ones(m.n_vertices)).max() <= 1e-9 * norm
    assert np.all(ops.mass > 0)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=m.n_vertices)
    x -= x.mean()
    assert x @ (L @ x) > 0


def test_laplacian_permutation_commutes():
    m = normalize_mesh(random_sphere_mesh(50, 7))
    perm = np.random.default_rng(0).permutation(50)
    a, b = cotan_laplacian(m), cotan_laplacian(m.permuted(perm))
    np.testing.assert_allclose(b.L.toarray(), a.L.toarray()[np.ix_(perm, perm)], atol=1e-13)
    np.testing.assert_allclose(b.mass, a.mass[perm], rtol=1e-13)


def test_boundary_edges_single_cot_term():
    # right triangle: the hypotenuse is opposite the 90 degree angle (cot = 0)
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    L = cotan_laplacian(Mesh(v, np.array([[0, 1, 2]]))).L.toarray()
    assert L[1, 2] == pytest.approx(0.0, abs=1e-15)
    assert L[0, 1] == pytest.approx(-0.5, rel=1e-12)


def test_degenerate_triangle_clamped_with_warning():
    v = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0], [2, 1, 0]], dtype=float)
    f = np.array([[0, 1, 2], [0, 1, 3], [1, 2, 4]])
    with pytest.warns(RuntimeWarning, match="near-zero-area"):
        ops = cotan_laplacian(Mesh(v, f))
    off = ops.L.toarray() - np.diag(ops.L.diagonal())
    # each off-diagonal is half a sum of at most two clamped cotangents
    assert np.abs(off).max() <= COT_CLAMP
    assert np.all(np.isfinite(ops.L.data))


def test_non_manifold_edge_accepted():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]], dtype=float)
    f = np.array([[0, 1, 2], [0, 1, 3], [0, 1, 4]])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        L = cotan_laplacian(Mesh(v, f)).L.toarray()
    # edge (0,1) is opposite a 45 degree corner (cot 1) in each of three faces
    assert L[0, 1] == pytest.approx(-1.5, rel=1e-12)
    assert L[0, 2] == pytest.approx(-0.5, rel=1e-12)


# ---------------------------------------------------------------- edge graph


def test_tetrahedron_six_edges():
    eg = edge_graph(tetrahedron())
    assert len(eg.edges) == 6
    assert np.all(eg.lengths > 0)


def test_unit_edge_weights():
    ang = np.arange(6) * np.pi / 3
    v = np.vstack([[0, 0, 0], np.column_stack([np.cos(ang), np.sin(ang), np.zeros(6)])])
    f = np.array([[0, 1 + k, 1 + (k + 1) % 6] for k in range(6)])
    np.testing.assert_allclose(edge_graph(Mesh(v, f)).lengths, 1.0, rtol=1e-12)


def test_edge_count_brute_force(sphere300):
    seen = set()
    for a, b, c in sphere300.faces.tolist():
        for i, j in ((a, b), (b, c), (c, a)):
            seen.add((min(i, j), max(i, j)))
    eg = edge_graph(sphere300)
    assert len(eg.edges) == len(seen) == 3 * sphere300.n_faces // 2
    assert sphere300.euler_characteristic() == 2


def test_edge_graph_symmetric():
    eg = edge_graph(shapes.torus(8, 6))
    S = eg.to_sparse()
    assert (S != S.T).nnz == 0
    adj = eg.neighbors()
    for i, nbrs in enumerate(adj):
        for j, w in nbrs:
            assert (i, w) in adj[j]

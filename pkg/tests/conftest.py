import numpy as np
import pytest

from geotok import shapes
from geotok.mesh import Mesh, normalize_mesh

TETRA_OFF = """OFF
4 4 0
0 0 0
1 0 0
0 1 0
0 0 1
3 0 2 1
3 0 1 3
3 0 3 2
3 1 2 3
"""


def tetrahedron():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return Mesh(v, f)


def random_sphere_mesh(n, seed):
    """Convex hull of ``n`` random unit vectors: a closed genus-0 mesh with irregular triangles."""
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    return Mesh(pts, shapes._outward_hull(pts))


def grid_patch(nx, ny):
    """Flat open triangulated ``nx x ny`` grid in the z=0 plane."""
    xs, ys = np.meshgrid(np.arange(nx + 1, dtype=float), np.arange(ny + 1, dtype=float), indexing="ij")
    v = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(xs.size)])
    idx = np.arange(v.shape[0]).reshape(nx + 1, ny + 1)
    f = []
    for i in range(nx):
        for j in range(ny):
            a, b, c, d = idx[i, j], idx[i + 1, j], idx[i + 1, j + 1], idx[i, j + 1]
            f += [[a, b, c], [a, c, d]]
    return Mesh(v, np.array(f))


@pytest.fixture(scope="session")
def sphere300():
    return normalize_mesh(shapes.fibonacci_sphere(300))


@pytest.fixture(scope="session")
def ico3():
    return normalize_mesh(shapes.icosphere(3))

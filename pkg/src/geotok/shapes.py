"""Procedural test shapes: spheres, tori, boxes and organic blobs."""

import numpy as np
from scipy.spatial import ConvexHull
from scipy.spatial.transform import Rotation

from .mesh import Mesh


def icosahedron():
    phi = (1 + 5 ** 0.5) / 2
    v = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    return Mesh(v / np.linalg.norm(v[0]), f)


def icosphere(subdivisions=3):
    """Unit icosphere with ``10 * 4**s + 2`` vertices."""
    base = icosahedron()
    v = [tuple(p) for p in base.vertices]
    f = base.faces.tolist()
    for _ in range(subdivisions):
        cache = {}
        verts = v

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = (np.asarray(verts[a]) + np.asarray(verts[b])) / 2
                verts.append(tuple(m / np.linalg.norm(m)))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in f:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        f = new_faces
    return Mesh(np.array(v), np.array(f))


def _outward_hull(points):
    hull = ConvexHull(points)
    faces = hull.simplices.copy()
    centroid = points.mean(axis=0)
    v = points[faces]
    normal = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    flip = np.einsum("ij,ij->i", normal, v[:, 0] - centroid) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return faces


def fibonacci_sphere(n=300):
    """Near-uniform unit sphere with exactly ``n`` vertices."""
    k = np.arange(n) + 0.5
    z = 1 - 2 * k / n
    r = np.sqrt(1 - z * z)
    theta = np.pi * (1 + 5 ** 0.5) * k
    pts = np.column_stack([r * np.cos(theta), r * np.sin(theta), z])
    return Mesh(pts, _outward_hull(pts))


def torus(n_major=48, n_minor=24, major=1.0, minor=0.4):
    u = 2 * np.pi * np.arange(n_major) / n_major
    w = 2 * np.pi * np.arange(n_minor) / n_minor
    uu, ww = np.meshgrid(u, w, indexing="ij")
    x = (major + minor * np.cos(ww)) * np.cos(uu)
    y = (major + minor * np.cos(ww)) * np.sin(uu)
    z = minor * np.sin(ww)
    v = np.column_stack([x.ravel(), y.ravel(), z.ravel()])
    idx = np.arange(n_major * n_minor).reshape(n_major, n_minor)
    a = idx
    b = np.roll(idx, -1, axis=0)
    c = np.roll(np.roll(idx, -1, axis=0), -1, axis=1)
    d = np.roll(idx, -1, axis=1)
    f = np.concatenate([np.stack([a, b, c], -1).reshape(-1, 3), np.stack([a, c, d], -1).reshape(-1, 3)])
    return Mesh(v, f)


def box(n=8, extents=(1.0, 1.0, 1.0)):
    """Closed axis-aligned box surface, ``n`` segments per edge."""
    g = np.linspace(-1, 1, n + 1)
    verts = {}
    pts = []
    faces = []

    def vid(p):
        key = tuple(np.round(p, 12))
        if key not in verts:
            verts[key] = len(pts)
            pts.append(p)
        return verts[key]

    for axis in range(3):
        for side in (-1.0, 1.0):
            a1, a2 = [k for k in range(3) if k != axis]
            grid = np.empty((n + 1, n + 1), dtype=int)
            for i, s in enumerate(g):
                for j, t in enumerate(g):
                    p = np.zeros(3)
                    p[axis], p[a1], p[a2] = side, s, t
                    grid[i, j] = vid(p)
            for i in range(n):
                for j in range(n):
                    q = [grid[i, j], grid[i + 1, j], grid[i + 1, j + 1], grid[i, j + 1]]
                    if side < 0:
                        q = q[::-1]
                    faces += [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]
    v = np.array(pts) * np.asarray(extents)
    return Mesh(v, np.array(faces))


def radial_deform(mesh, radius_fn):
    """Move each vertex along its direction from the origin to ``radius_fn(unit_dir)``."""
    u = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
    return Mesh(u * radius_fn(u)[:, None], mesh.faces)


def blob(subdivisions=4, seed=7, n_lobes=6, amplitude=0.35):
    """Organic genus-0 shape: a sphere with smooth random lobes."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_lobes, 3))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    heights = amplitude * rng.uniform(0.3, 1.0, n_lobes) * rng.choice([-0.5, 1.0], n_lobes)
    widths = rng.uniform(0.25, 0.6, n_lobes)

    def radius(u):
        r = np.ones(len(u))
        for c, h, s in zip(centers, heights, widths):
            ang = np.arccos(np.clip(u @ c, -1, 1))
            r += h * np.exp(-(ang / s) ** 2)
        return r

    return radial_deform(icosphere(subdivisions), radius)


def random_rotation(rng):
    return Rotation.random(random_state=rng).as_matrix()


def jitter(mesh, rng, fraction):
    """Displace each vertex by a random vector of length at most ``fraction * radius``."""
    radius = np.linalg.norm(mesh.vertices - mesh.vertices.mean(0), axis=1).max()
    d = rng.normal(size=mesh.vertices.shape)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    d *= rng.uniform(0, fraction * radius, size=(mesh.n_vertices, 1))
    return Mesh(mesh.vertices + d, mesh.faces)

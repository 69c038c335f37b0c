"""Triangle meshes: file I/O, normalization and discrete operators.

The Laplacian is the cotangent weak-form operator with a barycentric
lumped mass matrix. ``L`` is positive semidefinite with zero row sums,
so ``L @ ones == 0`` and the generalized problem ``L phi = lam W phi``
has its smallest eigenvalue at zero.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import DegenerateGeometryError, MeshFormatError, MeshValidationError

COT_CLAMP = 1e4
DEGENERATE_AREA = 1e-12


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Mesh:
    """Triangle mesh with validated connectivity.

    Parameters
    ----------
    vertices : (N, 3) float array
    faces : (F, 3) int array of vertex indices
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshValidationError(f"vertices must have shape (N, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshValidationError(f"faces must have shape (F, 3), got {f.shape}")
        if len(f) == 0:
            raise MeshValidationError("mesh has no faces")
        if not np.issubdtype(f.dtype, np.integer):
            if not np.all(np.equal(np.mod(f, 1), 0)):
                raise MeshValidationError("face indices must be integers")
        f = f.astype(np.int64)
        n = len(v)
        bad = (f < 0) | (f >= n)
        if bad.any():
            face_no = int(np.nonzero(bad.any(axis=1))[0][0])
            raise MeshValidationError(
                f"face {face_no} has index {f[face_no].tolist()} outside [0, {n})"
            )
        degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if degenerate.any():
            face_no = int(np.nonzero(degenerate)[0][0])
            raise MeshValidationError(f"face {face_no} repeats a vertex: {f[face_no].tolist()}")
        if not np.all(np.isfinite(v)):
            raise MeshValidationError("vertex coordinates must be finite")
        used = np.zeros(n, dtype=bool)
        used[f.ravel()] = True
        if not used.all():
            raise MeshValidationError(
                f"{int((~used).sum())} vertices are not referenced by any face"
            )
        object.__setattr__(self, "vertices", _frozen(v, np.float64))
        object.__setattr__(self, "faces", _frozen(f, np.int64))

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def fingerprint(self):
        """Content hash of the vertex and face arrays."""
        h = hashlib.sha256()
        h.update(self.vertices.astype("<f8").tobytes())
        h.update(self.faces.astype("<i8").tobytes())
        return h.hexdigest()

    def face_areas(self):
        v = self.vertices
        f = self.faces
        cr = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        return 0.5 * np.linalg.norm(cr, axis=1)

    def unique_edges(self):
        """Sorted ``(E, 2)`` array of undirected edges with ``i < j``."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def euler_characteristic(self):
        return self.n_vertices - len(self.unique_edges()) + self.n_faces

    def permuted(self, perm):
        """Relabel vertices so that new vertex ``k`` is old vertex ``perm[k]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return Mesh(self.vertices[perm], inv[self.faces])

    def transformed(self, rotation, translation=(0.0, 0.0, 0.0), scale=1.0):
        v = scale * self.vertices @ np.asarray(rotation).T + np.asarray(translation)
        return Mesh(v, self.faces)


@dataclass(frozen=True)
class OperatorSet:
    """Sparse Laplacian ``L`` and the diagonal of the lumped mass matrix."""

    L: sparse.csr_matrix
    mass: np.ndarray = field(repr=False)

    @property
    def W(self):
        return sparse.diags(self.mass, format="csr")

    @property
    def n(self):
        return self.L.shape[0]


@dataclass(frozen=True)
class EdgeGraph:
    """Undirected edge graph weighted by Euclidean edge length."""

    edges: np.ndarray
    lengths: np.ndarray
    n_vertices: int

    def to_sparse(self):
        i, j = self.edges[:, 0], self.edges[:, 1]
        n = self.n_vertices
        m = sparse.coo_matrix(
            (np.concatenate([self.lengths, self.lengths]), (np.concatenate([i, j]), np.concatenate([j, i]))),
            shape=(n, n),
        )
        return m.tocsr()

    def neighbors(self):
        """Adjacency list: ``neighbors()[i]`` is a list of ``(j, length)``."""
        adj = [[] for _ in range(self.n_vertices)]
        for (i, j), w in zip(self.edges.tolist(), self.lengths.tolist()):
            adj[i].append((j, w))
            adj[j].append((i, w))
        return adj


# --------------------------------------------------------------------------
# file I/O


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fan(poly):
    return [(poly[0], poly[k], poly[k + 1]) for k in range(1, len(poly) - 1)]


def _parse_obj(path, lines):
    verts, faces = [], []
    for line_no, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] == "v":
                if len(tok) < 4:
                    raise ValueError("vertex needs 3 coordinates")
                verts.append([float(x) for x in tok[1:4]])
            elif tok[0] == "f":
                if len(tok) < 4:
                    raise ValueError("face needs at least 3 vertices")
                poly = []
                for t in tok[1:]:
                    idx = int(t.split("/")[0])
                    # OBJ is 1-based; negative indices count back from the current vertex
                    poly.append(idx - 1 if idx > 0 else len(verts) + idx)
                faces.extend(_fan(poly))
        except ValueError as exc:
            raise MeshFormatError(path, line_no, str(exc)) from None
    return verts, faces


def _content_lines(lines):
    for line_no, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield line_no, line


def _parse_off(path, lines):
    it = _content_lines(lines)
    try:
        line_no, line = next(it)
    except StopIteration:
        raise MeshFormatError(path, 1, "empty file") from None
    tok = line.split()
    if not tok[0].endswith("OFF"):
        raise MeshFormatError(path, line_no, "missing OFF header")
    if tok[0] != "OFF":
        raise MeshFormatError(path, line_no, f"unsupported OFF variant {tok[0]!r}")
    tok = tok[1:]
    try:
        if not tok:
            line_no, line = next(it)
            tok = line.split()
        nv, nf = int(tok[0]), int(tok[1])
    except (StopIteration, ValueError, IndexError):
        raise MeshFormatError(path, line_no, "bad vertex/face count line") from None
    verts, faces = [], []
    try:
        for _ in range(nv):
            line_no, line = next(it)
            verts.append([float(x) for x in line.split()[:3]])
            if len(verts[-1]) != 3:
                raise ValueError("vertex needs 3 coordinates")
        for _ in range(nf):
            line_no, line = next(it)
            tok = line.split()
            k = int(tok[0])
            if k < 3 or len(tok) < k + 1:
                raise ValueError("bad face record")
            faces.extend(_fan([int(x) for x in tok[1 : k + 1]]))
    except StopIteration:
        raise MeshFormatError(path, line_no, "unexpected end of file") from None
    except ValueError as exc:
        raise MeshFormatError(path, line_no, str(exc)) from None
    return verts, faces


def _parse_ply(path, lines):
    if not lines or lines[0].strip() != "ply":
        raise MeshFormatError(path, 1, "missing ply magic")
    elements = []  # (name, count, [(prop_name, is_list)])
    line_no = 1
    header_end = None
    for line_no, raw in enumerate(lines[1:], 2):
        tok = raw.split()
        if not tok:
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise MeshFormatError(path, line_no, f"only ASCII PLY is supported, got {tok[1]}")
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise MeshFormatError(path, line_no, "property before element")
            elements[-1][2].append((tok[-1], tok[1] == "list"))
        elif tok[0] == "end_header":
            header_end = line_no
            break
    if header_end is None:
        raise MeshFormatError(path, line_no, "missing end_header")
    body = lines[header_end:]
    pos = 0
    verts, faces = [], []
    for name, count, props in elements:
        for _ in range(count):
            while pos < len(body) and not body[pos].strip():
                pos += 1
            if pos >= len(body):
                raise MeshFormatError(path, header_end + pos, "unexpected end of file")
            line_no = header_end + pos + 1
            tok = body[pos].split()
            pos += 1
            try:
                if name == "vertex":
                    names = [p for p, _ in props]
                    vals = [float(x) for x in tok[: len(props)]]
                    rec = dict(zip(names, vals))
                    verts.append([rec["x"], rec["y"], rec["z"]])
                elif name == "face":
                    k = int(tok[0])
                    if k < 3 or len(tok) < k + 1:
                        raise ValueError("bad face record")
                    faces.extend(_fan([int(x) for x in tok[1 : k + 1]]))
            except (ValueError, KeyError) as exc:
                raise MeshFormatError(path, line_no, f"bad {name} record: {exc}") from None
    return verts, faces


_PARSERS = {".obj": _parse_obj, ".off": _parse_off, ".ply": _parse_ply}


def load_mesh(path):
    """Read an ASCII OBJ, OFF or PLY file. Polygons are fan-triangulated."""
    path = Path(path)
    ext = path.suffix.lower()
    if ext not in _PARSERS:
        raise MeshFormatError(path, 0, f"unsupported extension {ext!r}")
    raw = path.read_bytes()
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError:
        # binary PLY payloads land here; the header itself is still readable
        head = raw[:512].decode("ascii", errors="replace")
        if ext == ".ply" and "format binary" in head:
            raise MeshFormatError(path, 2, "only ASCII PLY is supported, got binary") from None
        raise MeshFormatError(path, 0, "file is not ASCII text") from None
    verts, faces = _PARSERS[ext](path, text.splitlines())
    if not verts:
        raise MeshFormatError(path, 0, "no vertices found")
    return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_obj(path, mesh):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
        for a, b, c in mesh.faces + 1:
            fh.write(f"f {a} {b} {c}\n")


def write_ply(path, mesh, colors=None):
    """Write an ASCII PLY, optionally with per-vertex RGB colors (uint8)."""
    lines = ["ply", "format ascii 1.0", f"element vertex {mesh.n_vertices}",
             "property float x", "property float y", "property float z"]
    if colors is not None:
        colors = np.asarray(colors)
        if colors.shape != (mesh.n_vertices, 3):
            raise MeshValidationError(f"colors must have shape ({mesh.n_vertices}, 3)")
        colors = np.clip(np.rint(colors), 0, 255).astype(np.uint8)
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines += [f"element face {mesh.n_faces}", "property list uchar int vertex_indices", "end_header"]
    for i, (x, y, z) in enumerate(mesh.vertices):
        rec = f"{x:.9g} {y:.9g} {z:.9g}"
        if colors is not None:
            r, g, b = colors[i]
            rec += f" {r} {g} {b}"
        lines.append(rec)
    for a, b, c in mesh.faces:
        lines.append(f"3 {a} {b} {c}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


# --------------------------------------------------------------------------
# geometry


def normalize_mesh(mesh):
    """Center the vertex centroid at the origin and scale to the unit sphere."""
    v = mesh.vertices - mesh.vertices.mean(axis=0)
    radius = np.linalg.norm(v, axis=1).max()
    if not radius > 0 or radius < 1e-300:
        raise DegenerateGeometryError("all vertices coincide; cannot normalize")
    return Mesh(v / radius, mesh.faces)


def _corner_cotangents(mesh):
    v = mesh.vertices
    f = mesh.faces
    cots = np.empty((len(f), 3))
    for k in range(3):
        a = v[f[:, k]]
        b = v[f[:, (k + 1) % 3]]
        c = v[f[:, (k + 2) % 3]]
        e1, e2 = b - a, c - a
        dot = np.einsum("ij,ij->i", e1, e2)
        cross = np.linalg.norm(np.cross(e1, e2), axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            cot = dot / cross
        cot = np.where(cross > 0, cot, np.sign(dot) * COT_CLAMP)
        cots[:, k] = np.clip(cot, -COT_CLAMP, COT_CLAMP)
    return cots


def cotan_laplacian(mesh):
    """Cotangent Laplacian and barycentric lumped mass.

    Off-diagonals are ``-(cot a + cot b) / 2`` summed over every face
    incident to the edge, so boundary edges get one term and non-manifold
    edges get all of theirs.
    """
    n = mesh.n_vertices
    f = mesh.faces
    areas = mesh.face_areas()
    n_bad = int((areas < DEGENERATE_AREA).sum())
    if n_bad:
        warnings.warn(f"{n_bad} near-zero-area triangles; cotangents clamped to +/-{COT_CLAMP:g}",
                      RuntimeWarning, stacklevel=2)
    cots = _corner_cotangents(mesh)
    rows, cols, vals = [], [], []
    for k in range(3):
        # corner k is opposite the edge (k+1, k+2)
        i = f[:, (k + 1) % 3]
        j = f[:, (k + 2) % 3]
        rows.append(np.minimum(i, j))
        cols.append(np.maximum(i, j))
        vals.append(-0.5 * cots[:, k])
    upper = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    off = (upper + upper.T).tocsr()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    L = (off + sparse.diags(diag)).tocsr()
    L.sort_indices()

    mass = np.zeros(n)
    np.add.at(mass, f.ravel(), np.repeat(areas / 3.0, 3))
    if np.any(mass <= 0):
        raise DegenerateGeometryError(f"{int((mass <= 0).sum())} vertices have zero incident area")
    return OperatorSet(L=L, mass=_frozen(mass, np.float64))


def edge_graph(mesh):
    edges = mesh.unique_edges()
    d = mesh.vertices[edges[:, 0]] - mesh.vertices[edges[:, 1]]
    return EdgeGraph(edges=_frozen(edges, np.int64), lengths=_frozen(np.linalg.norm(d, axis=1), np.float64),
                     n_vertices=mesh.n_vertices)

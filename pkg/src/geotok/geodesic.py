"""Root-to-root graph geodesics and the additive attention mask built from them."""

import hashlib

import numpy as np
from scipy.sparse.csgraph import dijkstra

from .errors import DomainError
from .store import CorruptStoreError, read_store, write_store

MASK_SENTINEL = -1e9
ALLOWED_VALUE = 0.0


def supernode_geodesics(eg, part):
    """P x P shortest-path distances between roots along mesh edges.

    Entries are ``inf`` between roots on different connected components.
    """
    roots = np.asarray(part.roots, dtype=np.int64)
    if roots.min() < 0 or roots.max() >= eg.n_vertices:
        raise DomainError("root index out of range for the edge graph")
    d = dijkstra(eg.to_sparse(), directed=False, indices=roots)[:, roots]
    # both directions come from separate sweeps; take the smaller so the result is exactly symmetric
    g = np.minimum(d, d.T)
    np.fill_diagonal(g, 0.0)
    return g


def build_mask(g, radius=np.inf, allowed_value=ALLOWED_VALUE, sentinel=MASK_SENTINEL):
    """Additive mask: ``allowed_value`` where ``g <= radius`` or on the diagonal, ``sentinel`` elsewhere.

    ``radius=inf`` disables masking.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise DomainError(f"geodesic matrix must be square, got shape {g.shape}")
    radius = float(radius)
    if np.isnan(radius) or radius < 0:
        raise DomainError(f"mask radius must be >= 0 or inf, got {radius}")
    allowed = g <= radius
    np.fill_diagonal(allowed, True)
    return np.where(allowed, float(allowed_value), float(sentinel))


def roots_hash(part):
    return hashlib.sha256(np.asarray(part.roots, dtype="<i8").tobytes()).hexdigest()


def save_geodesics(directory, g, part, mesh_hash):
    write_store(directory, {"geodesic": g},
                meta={"kind": "geodesic", "P": int(len(g)), "roots_hash": roots_hash(part), "mesh_hash": mesh_hash})


def load_geodesics(directory, part, mesh_hash):
    """Cached matrix, or None when absent, corrupt or built for other roots."""
    try:
        arrays, manifest = read_store(directory, ["geodesic"])
    except (FileNotFoundError, CorruptStoreError):
        return None
    if manifest.get("mesh_hash") != mesh_hash or manifest.get("roots_hash") != roots_hash(part):
        return None
    return arrays["geodesic"]

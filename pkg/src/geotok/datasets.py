"""Synthetic desk-scale tasks: octant segmentation and primitive classification."""

import hashlib
from dataclasses import dataclass

import numpy as np

from . import shapes
from .errors import DomainError
from .mesh import Mesh

KINDS = ("octant_seg", "primitive_cls")
OCTANT_SIGNS = np.array([[sx, sy, sz] for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)], dtype=float)
# one bump per octant centre, each with its own height, so every octant is intrinsically recognisable
OCTANT_BUMP_HEIGHTS = np.linspace(0.08, 0.50, 8)
OCTANT_BUMP_WIDTH = 0.45
PRIMITIVES = ("sphere", "torus", "box")


@dataclass
class ToyDataset:
    kind: str
    n_classes: int
    meshes: list
    labels: list
    split: np.ndarray

    def __len__(self):
        return len(self.meshes)

    def indices(self, split):
        return [i for i, s in enumerate(self.split) if s == split]

    def fingerprint(self):
        h = hashlib.sha256(self.kind.encode())
        for m, y, s in zip(self.meshes, self.labels, self.split):
            h.update(m.fingerprint().encode())
            h.update(np.asarray(y, dtype="<i8").tobytes())
            h.update(str(s).encode())
        return h.hexdigest()


def octant_labels(points):
    """Octant id ``0..7`` of each point from the signs of its coordinates (zero counts as positive)."""
    neg = (np.asarray(points) < 0).astype(np.int64)
    return 4 * neg[:, 0] + 2 * neg[:, 1] + neg[:, 2]


def bumpy_sphere(subdivisions, heights=OCTANT_BUMP_HEIGHTS, width=OCTANT_BUMP_WIDTH):
    """Icosphere with a Gaussian bump at each octant centre ``(+-1, +-1, +-1)/sqrt(3)``."""
    centers = OCTANT_SIGNS / np.sqrt(3.0)

    def radius(u):
        ang = np.arccos(np.clip(u @ centers.T, -1.0, 1.0))
        return 1.0 + (heights[None, :] * np.exp(-(ang / width) ** 2)).sum(axis=1)

    return shapes.radial_deform(shapes.icosphere(subdivisions), radius)


def _pose(mesh, rng):
    return mesh.transformed(shapes.random_rotation(rng), translation=rng.uniform(-1.0, 1.0, 3))


def _split(n, rng):
    n_test = max(1, int(round(0.2 * n)))
    split = np.array(["train"] * n, dtype=object)
    split[rng.permutation(n)[:n_test]] = "test"
    return split


def generate_toy_dataset(kind, n_items, seed=0, subdivisions=(3, 4), jitter=0.01):
    """Deterministic synthetic dataset with an 80/20 train/test split.

    ``octant_seg`` labels each vertex of a bumpy icosphere by octant in the
    canonical frame, then applies a random rigid pose. ``primitive_cls``
    labels jittered spheres, tori and boxes.
    """
    if kind not in KINDS:
        raise DomainError(f"kind must be one of {KINDS}, got {kind!r}")
    if n_items < 2:
        raise DomainError("a dataset needs at least 2 items")
    if not 0.0 <= jitter <= 0.02:
        raise DomainError("jitter must lie in [0, 0.02] of the radius")
    rng = np.random.default_rng(seed)
    meshes, labels = [], []
    for i in range(n_items):
        if kind == "octant_seg":
            base = bumpy_sphere(int(rng.choice(subdivisions)))
            m = shapes.jitter(base, rng, jitter)
            labels.append(octant_labels(m.vertices))
        else:
            cls = i % len(PRIMITIVES)
            base = {"sphere": lambda: shapes.icosphere(3),
                    "torus": lambda: shapes.torus(32, 16),
                    "box": lambda: shapes.box(8)}[PRIMITIVES[cls]]()
            m = shapes.jitter(base, rng, jitter)
            labels.append(np.array([cls]))
        meshes.append(_pose(m, rng))
    n_classes = 8 if kind == "octant_seg" else len(PRIMITIVES)
    return ToyDataset(kind, n_classes, meshes, labels, _split(n_items, rng))

"""Per-mesh precompute cache: eigenbasis, HKS, partitions and root geodesics on disk.

Layout under the cache root (``$GEOTOK_CACHE_DIR`` or ``~/.cache/geotok``)::

    <mesh hash[:16]>/
        mesh.json                         source path, hashes, vertex count
        basis-k<k>/                       eigenvalues, eigenvectors, mass_diag
        hks-k<k>-<t_min>-<t_max>-<n>/     hks
        partition-<method>-P<p>-...json   assignment file
        geodesic-<partition stem>/        root-to-root distances

Entries are validated on read; corrupt or stale ones are recomputed with a
warning.
"""

import json
import os
import warnings
from pathlib import Path

from .errors import StaleCacheError
from .geodesic import load_geodesics, save_geodesics, supernode_geodesics
from .mesh import cotan_laplacian, edge_graph, file_hash, normalize_mesh
from .model import MeshBundle
from .spectral import compute_hks, eigendecompose, load_basis, log_time_samples, save_basis
from .store import CorruptStoreError, read_store, write_store
from .tokenize import build_partition, load_assignment, save_assignment

CACHE_ENV = "GEOTOK_CACHE_DIR"


def cache_root(override=None):
    if override is not None:
        return Path(override)
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else Path.home() / ".cache" / "geotok"


def mesh_dir(root, mesh_hash):
    return Path(root) / mesh_hash[:16]


def _partition_stem(cfg, p, assignment_path=None):
    if assignment_path is not None:
        return f"partition-import-P{p}-{file_hash(assignment_path)[:12]}"
    return f"partition-{cfg.partitioner}-P{p}-s{cfg.seed}-{cfg.clamp_mode}"


def _basis_k(cfg, n):
    return min(cfg.k_eig, n - 1)


def _missing(mesh_hash, root, what):
    return StaleCacheError(
        f"no precompute cache for mesh {mesh_hash[:12]} ({what}) under {root}; run `geotok precompute "
        f"--config <same config>` first")


def _warn_recompute(path, what):
    warnings.warn(f"cache entry {path} is corrupt or stale; recomputing {what}", RuntimeWarning, stacklevel=3)


def mesh_bundle(mesh, cfg, root=None, compute=True, assignment_path=None, source=None):
    """Load the precompute bundle of ``mesh`` from the cache, computing missing parts.

    With ``compute=False`` a missing entry raises :class:`StaleCacheError`
    naming the precompute command. Returns ``(bundle, status)`` where
    ``status`` maps each entry to ``"hit"``, ``"computed"`` or ``"recomputed"``.
    """
    root = cache_root(root)
    mesh_hash = mesh.fingerprint()
    d = mesh_dir(root, mesh_hash)
    status = {}
    m = normalize_mesh(mesh)
    ops = None

    def get_ops():
        nonlocal ops
        if ops is None:
            ops = cotan_laplacian(m)
        return ops

    def produce(name, path, load, make, save):
        found = load()
        if found is not None:
            status[name] = "hit"
            return found
        if not compute:
            raise _missing(mesh_hash, root, name)
        existed = Path(path).exists()
        if existed:
            _warn_recompute(path, name)
        value = make()
        save(value)
        status[name] = "recomputed" if existed else "computed"
        return value

    k = _basis_k(cfg, m.n_vertices)
    basis_path = d / f"basis-k{k}"
    basis = produce("basis", basis_path, lambda: load_basis(basis_path, mesh_hash, k_eig=k),
                    lambda: eigendecompose(get_ops(), k, seed=cfg.seed),
                    lambda b: save_basis(basis_path, b, mesh_hash))

    hks_path = d / f"hks-k{k}-{cfg.t_min!r}-{cfg.t_max!r}-{cfg.hks_count}"
    hks = produce("hks", hks_path, lambda: _load_hks(hks_path, mesh_hash),
                  lambda: compute_hks(basis, log_time_samples(cfg.t_min, cfg.t_max, cfg.hks_count)),
                  lambda h: write_store(hks_path, {"hks": h}, meta={"kind": "hks", "mesh_hash": mesh_hash}))

    eg = None
    parts, geos = {}, {}
    for p in cfg.resolutions:
        stem = _partition_stem(cfg, p, assignment_path)
        part_path = d / f"{stem}.json"
        part = produce(f"partition[{p}]", part_path, lambda: _load_partition(part_path, m.n_vertices, p),
                       lambda: build_partition(m, p, method="import" if assignment_path else cfg.partitioner,
                                               seed=cfg.seed, ops=get_ops(), clamp_mode=cfg.clamp_mode,
                                               assignment_path=assignment_path),
                       lambda q: save_assignment(part_path, q))
        geo_path = d / f"geodesic-{stem}"
        if eg is None:
            eg = edge_graph(m)
        geos[p] = produce(f"geodesic[{p}]", geo_path, lambda: load_geodesics(geo_path, part, mesh_hash),
                          lambda: supernode_geodesics(eg, part),
                          lambda g: save_geodesics(geo_path, g, part, mesh_hash))
        parts[p] = part

    if compute:
        info = {"mesh_hash": mesh_hash, "N": int(m.n_vertices)}
        if source is not None:
            info.update(source=str(source), source_sha256=file_hash(source))
        d.mkdir(parents=True, exist_ok=True)
        (d / "mesh.json").write_text(json.dumps(info, indent=2, sort_keys=True), encoding="utf-8")
    return MeshBundle(mesh_hash, m.vertices.copy(), basis, hks, parts, geos), status


def _load_hks(path, mesh_hash):
    try:
        arrays, manifest = read_store(path, ["hks"])
    except (FileNotFoundError, CorruptStoreError):
        return None
    return arrays["hks"] if manifest.get("mesh_hash") == mesh_hash else None


def _load_partition(path, n_vertices, p):
    if not Path(path).exists():
        return None
    try:
        part = load_assignment(path, n_vertices)
    except (ValueError, KeyError, TypeError):
        return None
    return part if part.P == p else None


def bundles_for(meshes, cfg, root=None, compute=False):
    return [mesh_bundle(m, cfg, root, compute=compute)[0] for m in meshes]


def cached_fine_basis(mesh, root=None, min_k=1):
    """The largest cached eigenbasis of ``mesh`` with at least ``min_k`` pairs, or None."""
    mesh_hash = mesh.fingerprint()
    d = mesh_dir(cache_root(root), mesh_hash)
    best = None
    for sub in sorted(d.glob("basis-k*")) if d.exists() else []:
        try:
            k = int(sub.name[len("basis-k"):])
        except ValueError:
            continue
        if k >= min_k and (best is None or k > best[0]):
            b = load_basis(sub, mesh_hash)
            if b is not None:
                best = (k, b)
    return None if best is None else best[1]

"""Model configuration, per-mesh precompute bundles and the assembled patch transformer."""

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DomainError, StaleCacheError
from .geodesic import build_mask, supernode_geodesics
from .layers import (
    Context, CrossAttentionInteract, DiffusionBlock, LayerConfig, Linear, MLPBlock, Module, PatchAggregate,
    TransformerBlock, multires_to_node,
)
from .mesh import cotan_laplacian, edge_graph, normalize_mesh
from .spectral import compute_hks, eigendecompose, log_time_samples
from .tokenize import build_partition, patch_average

TASKS = ("segmentation", "classification")
INPUTS = ("hks", "xyz")


@dataclass(frozen=True)
class ModelConfig:
    layer: LayerConfig = field(default_factory=LayerConfig)
    task: str = "segmentation"
    n_classes: int = 8
    partitions: int = 256
    multi_res: tuple = ()
    partitioner: str = "rns"
    mask_radius: float = math.inf
    use_se: bool = True
    inputs: str = "hks"
    k_eig: int = 128
    hks_count: int = 16
    t_min: float = 0.01
    t_max: float = 1.0
    clamp_mode: str = "exclude"
    seed: int = 0
    epochs: int = 200
    lr: float = 1e-3
    lr_decay_every: int = 50
    lr_decay: float = 0.5
    weight_decay: float = 0.0

    def __post_init__(self):
        if isinstance(self.layer, dict):
            object.__setattr__(self, "layer", LayerConfig(**self.layer))
        object.__setattr__(self, "multi_res", tuple(int(p) for p in self.multi_res))
        object.__setattr__(self, "mask_radius", float(self.mask_radius))
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.inputs not in INPUTS:
            raise ConfigError(f"inputs must be one of {INPUTS}, got {self.inputs!r}")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.partitions < 1 or any(p < 1 for p in self.multi_res):
            raise ConfigError("partition counts must be >= 1")
        if self.partitioner not in ("rns", "baseline"):
            raise ConfigError(f"partitioner must be 'rns' or 'baseline', got {self.partitioner!r}")
        if math.isnan(self.mask_radius) or self.mask_radius < 0:
            raise ConfigError("mask_radius must be >= 0 (inf disables masking)")
        if self.k_eig < 1 or self.hks_count < 1 or self.epochs < 0:
            raise ConfigError("k_eig and hks_count must be >= 1 and epochs >= 0")

    @property
    def resolutions(self):
        return self.multi_res if self.multi_res else (self.partitions,)

    @property
    def input_dim(self):
        return self.hks_count if self.inputs == "hks" else 3

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["multi_res"] = list(self.multi_res)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "layer" in d:
            layer = dict(d["layer"])
            lk = {f.name for f in dataclasses.fields(LayerConfig)}
            if set(layer) - lk:
                raise ConfigError(f"unknown layer keys: {sorted(set(layer) - lk)}")
            d["layer"] = LayerConfig(**layer)
        return cls(**d)

    def replace(self, **changes):
        layer_changes = {k: changes.pop(k) for k in list(changes) if k in LayerConfig.__dataclass_fields__}
        layer = dataclasses.replace(self.layer, **layer_changes) if layer_changes else self.layer
        return dataclasses.replace(self, layer=layer, **changes)


@dataclass
class MeshBundle:
    """Everything the network needs for one mesh, computed once before training."""

    mesh_hash: str
    vertices: np.ndarray
    basis: object
    hks: np.ndarray
    partitions: dict
    geodesics: dict

    @property
    def n_vertices(self):
        return len(self.vertices)

    def permuted(self, perm):
        """The bundle of the same mesh with vertices relabelled (new k = old perm[k])."""
        return MeshBundle(self.mesh_hash, self.vertices[perm], self.basis.permuted(perm), self.hks[perm],
                          {p: part.permuted(perm) for p, part in self.partitions.items()}, dict(self.geodesics))


def precompute(mesh, cfg, partitions=None):
    """Normalize ``mesh`` and compute its eigenbasis, HKS, partitions and root geodesics.

    ``partitions`` optionally supplies ready-made ``{P: Partitioning}`` entries
    (for instance carried over from another labelling of the same mesh).
    """
    m = normalize_mesh(mesh)
    ops = cotan_laplacian(m)
    basis = eigendecompose(ops, min(cfg.k_eig, m.n_vertices - 1), seed=cfg.seed)
    hks = compute_hks(basis, log_time_samples(cfg.t_min, cfg.t_max, cfg.hks_count))
    eg = edge_graph(m)
    parts, geos = {}, {}
    for p in cfg.resolutions:
        if partitions is not None and p in partitions:
            parts[p] = partitions[p]
        else:
            parts[p] = build_partition(m, p, method=cfg.partitioner, seed=cfg.seed, ops=ops,
                                       clamp_mode=cfg.clamp_mode)
        geos[p] = supernode_geodesics(eg, parts[p])
    return MeshBundle(mesh.fingerprint(), m.vertices.copy(), basis, hks, parts, geos)


def node_features(bundle, cfg):
    if cfg.inputs == "xyz":
        return np.asarray(bundle.vertices, dtype=np.float64)
    return standardized_log_hks(bundle.hks, bundle.basis.mass)


def standardized_log_hks(hks, mass):
    """Area-weighted z-score of ``log(hks)`` per column; intrinsic and independent of the signature scale."""
    w = mass / mass.sum()
    logh = np.log(hks)
    centered = logh - w @ logh
    return centered / np.sqrt(w @ centered ** 2 + 1e-12)


class PatchBranch(Module):
    """Patch pooling, structural embedding, masked transformer stack and cross-attention for one resolution."""

    def __init__(self, cfg, rng):
        super().__init__()
        d = cfg.layer.hidden_dim
        self.aggregate = self.add_child("aggregate", PatchAggregate(d, rng))
        self.se = self.add_child("se", Linear(cfg.hks_count, d, rng)) if cfg.use_se else None
        self.blocks = [self.add_child(f"block{i}", TransformerBlock(d, cfg.layer.n_heads, rng))
                       for i in range(cfg.layer.n_transformer_layers)]
        self.interact = self.add_child("interact", CrossAttentionInteract(d, cfg.layer.n_heads, rng))

    def __call__(self, x, part, geodesic, se_input, radius):
        tokens = self.aggregate(x, part)
        if self.se is not None:
            tokens = tokens + self.se(ad.Tensor(patch_average(part, se_input)))
        mask = None if math.isinf(radius) else build_mask(geodesic, radius)
        for block in self.blocks:
            tokens = block(tokens, mask)
        return self.interact(tokens, x)


class GeoTransformer(Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.layer.hidden_dim
        self.embed = self.add_child("embed", Linear(cfg.input_dim, d, rng))
        block = DiffusionBlock if cfg.layer.backbone == "diffusion" else MLPBlock
        self.backbone = [self.add_child(f"backbone{i}", block(d, rng, cfg.layer.dropout))
                         for i in range(cfg.layer.n_backbone_layers)]
        self.branches = [self.add_child(f"patch{p}", PatchBranch(cfg, rng)) for p in cfg.resolutions]
        d_head = 2 * d if cfg.task == "segmentation" else d
        self.head = self.add_child("head", Linear(d_head, cfg.n_classes, rng))

    def n_parameters(self):
        return int(sum(t.value.size for t in self.named_parameters().values()))

    def forward(self, bundle, ctx=None, mesh=None):
        """Logits: ``N x n_classes`` for segmentation, ``1 x n_classes`` for classification."""
        ctx = ctx or Context(training=False)
        cfg = self.cfg
        if mesh is not None and mesh.fingerprint() != bundle.mesh_hash:
            raise StaleCacheError("precompute bundle was built for a different mesh; rerun precompute")
        missing = [p for p in cfg.resolutions if p not in bundle.partitions]
        if missing:
            raise StaleCacheError(f"precompute bundle lacks partitions for P={missing}; rerun precompute")
        feats = node_features(bundle, cfg)
        se_input = node_features(bundle, cfg.replace(inputs="hks")) if cfg.use_se else None
        x = self.embed(ad.Tensor(feats))
        for block in self.backbone:
            x = block(x, ctx, bundle)
        parts = [bundle.partitions[p] for p in cfg.resolutions]
        outs = [branch(x, part, bundle.geodesics[p], se_input, cfg.mask_radius)
                for branch, part, p in zip(self.branches, parts, cfg.resolutions)]
        if cfg.task == "classification":
            pooled = ad.mean_rows(outs[0])
            for o in outs[1:]:
                pooled = pooled + ad.mean_rows(o)
            return self.head(pooled)
        up = multires_to_node(outs, parts)
        return self.head(ad.concat([up, x], axis=1))


def build_model(cfg):
    if cfg.layer.backbone not in ("vanilla", "diffusion"):
        raise ConfigError(f"unknown backbone {cfg.layer.backbone!r}")
    return GeoTransformer(cfg)


def predict(model, bundle):
    with ad.no_grad():
        logits = model.forward(bundle).value
    return logits.argmax(axis=1)


def check_bundle(bundle, n_vertices):
    if bundle.n_vertices != n_vertices:
        raise DomainError(f"bundle has {bundle.n_vertices} vertices, labels cover {n_vertices}")

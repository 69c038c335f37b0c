"""Trainable building blocks: node-level residual blocks, patch pooling, attention and upsampling."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DomainError

BACKBONES = ("vanilla", "diffusion")


@dataclass(frozen=True)
class LayerConfig:
    hidden_dim: int = 128
    n_heads: int = 4
    dropout: float = 0.5
    n_backbone_layers: int = 4
    n_transformer_layers: int = 2
    backbone: str = "vanilla"

    def __post_init__(self):
        if self.hidden_dim < 1 or self.n_heads < 1 or self.hidden_dim % self.n_heads:
            raise ConfigError(f"hidden_dim={self.hidden_dim} must be a positive multiple of n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.n_backbone_layers < 0 or self.n_transformer_layers < 0:
            raise ConfigError("layer counts must be >= 0")
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")

    @property
    def d_k(self):
        return self.hidden_dim // self.n_heads


class Module:
    """Container of named parameters and child modules."""

    def __init__(self):
        self._params = {}
        self._children = {}

    def add_param(self, name, value):
        t = ad.parameter(value, name=name)
        self._params[name] = t
        return t

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        out = {}
        for name, t in self._params.items():
            out[prefix + name] = t
        for name, child in self._children.items():
            out.update(child.named_parameters(prefix + name + "."))
        return out


def _glorot(rng, d_in, d_out):
    bound = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, size=(d_in, d_out))


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = self.add_param("weight", _glorot(rng, d_in, d_out))
        self.bias = self.add_param("bias", np.zeros(d_out)) if bias else None

    def __call__(self, x):
        if x.shape[-1] != self.d_in:
            raise DomainError(f"Linear expects {self.d_in} input channels, got {x.shape[-1]}")
        y = ad.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, d):
        super().__init__()
        self.gamma = self.add_param("gamma", np.ones(d))
        self.beta = self.add_param("beta", np.zeros(d))

    def __call__(self, x):
        return ad.layer_norm(x, self.gamma, self.beta)


class Context:
    """Per-forward state: train/eval mode and the dropout generator."""

    def __init__(self, training=False, rng=None):
        self.training = training
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def dropout(self, x, p):
        return ad.dropout(x, p, self.rng, self.training)


class PointMLP(Module):
    """Two-layer point-wise MLP ``Linear -> ReLU -> Dropout -> LayerNorm -> Linear``."""

    def __init__(self, d_in, d_hidden, d_out, rng, dropout=0.0, norm=True):
        super().__init__()
        self.fc1 = self.add_child("fc1", Linear(d_in, d_hidden, rng))
        self.fc2 = self.add_child("fc2", Linear(d_hidden, d_out, rng))
        self.norm = self.add_child("norm", LayerNorm(d_hidden)) if norm else None
        self.p = dropout

    def __call__(self, x, ctx):
        h = ctx.dropout(ad.relu(self.fc1(x)), self.p)
        if self.norm is not None:
            h = self.norm(h)
        return self.fc2(h)


class MLPBlock(Module):
    """Residual point-wise block ``x + f(x)``."""

    def __init__(self, d, rng, dropout=0.0):
        super().__init__()
        self.f = self.add_child("f", PointMLP(d, d, d, rng, dropout))

    def __call__(self, x, ctx, bundle=None):
        return x + self.f(x, ctx)


class DiffusionBlock(Module):
    """Residual block ``x + f([h_t(x), x])`` with learned per-channel diffusion times.

    Times are ``softplus(raw)`` so they stay positive.
    """

    def __init__(self, d, rng, dropout=0.0, t_range=(1e-3, 1.0)):
        super().__init__()
        t0 = np.geomspace(t_range[0], t_range[1], d)
        self.raw_t = self.add_param("raw_t", np.log(np.expm1(t0)))
        self.f = self.add_child("f", PointMLP(2 * d, d, d, rng, dropout))

    def times(self):
        return ad.softplus(self.raw_t)

    def __call__(self, x, ctx, bundle):
        basis = bundle.basis
        h = ad.spectral_diffuse(x, self.times(), basis.eigenvalues, basis.eigenvectors, basis.mass)
        return x + self.f(ad.concat([h, x], axis=1), ctx)


class PatchAggregate(Module):
    """Pool node features into patch tokens with member-wise softmax weights.

    Token ``p`` is ``sum_i softmax_i(x_i) * h(x_i)`` over the members ``i`` of
    patch ``p``; the softmax runs over members, separately for each channel.
    """

    def __init__(self, d, rng):
        super().__init__()
        self.h = self.add_child("h", Linear(d, d, rng))

    def __call__(self, x, part):
        w = ad.segment_softmax(x, part.assignment, part.P)
        return ad.segment_sum(ad.mul(w, self.h(x)), part.assignment, part.P)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with an additive mask, heads concatenated then projected."""

    def __init__(self, d, n_heads, rng):
        super().__init__()
        if d % n_heads:
            raise ConfigError(f"d={d} is not divisible by n_heads={n_heads}")
        self.d, self.n_heads, self.d_k = d, n_heads, d // n_heads
        self.q = self.add_child("q", Linear(d, d, rng, bias=False))
        self.k = self.add_child("k", Linear(d, d, rng, bias=False))
        self.v = self.add_child("v", Linear(d, d, rng, bias=False))
        self.out = self.add_child("out", Linear(d, d, rng))

    def __call__(self, x_q, x_kv=None, mask=None):
        x_kv = x_q if x_kv is None else x_kv
        if mask is not None and np.shape(mask) != (x_q.shape[0], x_kv.shape[0]):
            raise DomainError(f"mask shape {np.shape(mask)} does not match {x_q.shape[0]}x{x_kv.shape[0]} scores")
        Q, K, V = self.q(x_q), self.k(x_kv), self.v(x_kv)
        heads = []
        for h in range(self.n_heads):
            lo, hi = h * self.d_k, (h + 1) * self.d_k
            q, k, v = ad.slice_cols(Q, lo, hi), ad.slice_cols(K, lo, hi), ad.slice_cols(V, lo, hi)
            scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(self.d_k))
            heads.append(ad.matmul(ad.softmax_rows(scores, mask), v))
        return self.out(ad.concat(heads, axis=1))


class FeedForward(Module):
    def __init__(self, d, rng, d_hidden=None):
        super().__init__()
        d_hidden = d_hidden or 2 * d
        self.fc1 = self.add_child("fc1", Linear(d, d_hidden, rng))
        self.fc2 = self.add_child("fc2", Linear(d_hidden, d, rng))

    def __call__(self, x):
        return self.fc2(ad.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-LN block: ``X + MHA(LN(X))`` followed by ``X + f(LN(X))``."""

    def __init__(self, d, n_heads, rng):
        super().__init__()
        self.ln1 = self.add_child("ln1", LayerNorm(d))
        self.attn = self.add_child("attn", MultiHeadAttention(d, n_heads, rng))
        self.ln2 = self.add_child("ln2", LayerNorm(d))
        self.ffn = self.add_child("ffn", FeedForward(d, rng))

    def __call__(self, x, mask=None):
        x = x + self.attn(self.ln1(x), mask=mask)
        return x + self.ffn(self.ln2(x))


class CrossAttentionInteract(Module):
    """Patch tokens attend to node features; ``FFN(LN(F + scale * CA(LN(F), LN(x))))``.

    ``interaction_scale`` is a learned scalar weighting the cross branch.
    """

    def __init__(self, d, n_heads, rng, scale=1.0):
        super().__init__()
        self.ln_q = self.add_child("ln_q", LayerNorm(d))
        self.ln_kv = self.add_child("ln_kv", LayerNorm(d))
        self.attn = self.add_child("attn", MultiHeadAttention(d, n_heads, rng))
        self.interaction_scale = self.add_param("interaction_scale", np.array(float(scale)))
        self.ln_out = self.add_child("ln_out", LayerNorm(d))
        self.ffn = self.add_child("ffn", FeedForward(d, rng))

    def __call__(self, f, x_nodes):
        if f.shape[1] != x_nodes.shape[1]:
            raise DomainError(f"query width {f.shape[1]} differs from node width {x_nodes.shape[1]}")
        ca = self.attn(self.ln_q(f), self.ln_kv(x_nodes))
        return self.ffn(self.ln_out(f + ad.mul(self.interaction_scale, ca)))


def patch_to_node(x, part):
    """Copy each patch row to the patch's member vertices."""
    if x.shape[0] != part.P:
        raise DomainError(f"{x.shape[0]} patch rows for a partitioning with P={part.P}")
    return ad.gather_rows(x, part.assignment)


def multires_to_node(xs, parts):
    """Sum of per-resolution broadcasts; all partitionings must cover the same vertices."""
    if len(xs) != len(parts) or not parts:
        raise DomainError("need one patch tensor per partitioning")
    n = parts[0].n_vertices
    if any(p.n_vertices != n for p in parts):
        raise DomainError("resolutions are defined over different meshes")
    out = patch_to_node(xs[0], parts[0])
    for x, part in zip(xs[1:], parts[1:]):
        out = out + patch_to_node(x, part)
    return out

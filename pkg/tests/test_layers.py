import numpy as np
import pytest

from geotok import autodiff as ad
from geotok.errors import ConfigError, DomainError
from geotok.geodesic import build_mask
from geotok.layers import (
    Context, CrossAttentionInteract, DiffusionBlock, LayerConfig, Linear, MLPBlock, MultiHeadAttention,
    PatchAggregate, TransformerBlock, multires_to_node, patch_to_node,
)
from geotok.spectral import SpectralBasis
from geotok.tokenize import Partitioning

TOL = 1e-6


def rng_(seed=0):
    return np.random.default_rng(seed)


def projected(out, seed=99):
    return ad.total(ad.mul(out, ad.Tensor(rng_(seed).normal(size=out.shape))))


def zero_(*tensors):
    for t in tensors:
        t.value[...] = 0.0


class FakeBundle:
    def __init__(self, basis):
        self.basis = basis


def small_basis(n=8, k=5, seed=0):
    r = rng_(seed)
    q, _ = np.linalg.qr(r.normal(size=(n, k)))
    mass = r.uniform(0.5, 1.5, n)
    return SpectralBasis(np.sort(r.uniform(0, 4, k)), q / np.sqrt(mass)[:, None], mass)


# ---------------------------------------------------------------- config and containers


@pytest.mark.parametrize("kw", [{"hidden_dim": 10, "n_heads": 4}, {"dropout": 1.0}, {"backbone": "gnn"},
                                {"n_backbone_layers": -1}])
def test_layer_config_validation(kw):
    with pytest.raises(ConfigError):
        LayerConfig(**kw)


def test_layer_config_head_width():
    assert LayerConfig(hidden_dim=128, n_heads=4).d_k == 32


def test_named_parameters_are_dotted_and_unique():
    blk = TransformerBlock(8, 2, rng_())
    names = list(blk.named_parameters())
    assert len(names) == len(set(names))
    assert "attn.q.weight" in names and "ln1.gamma" in names and "ffn.fc2.bias" in names


# ---------------------------------------------------------------- identities


def test_linear_zero_weight_gives_bias():
    lin = Linear(3, 2, rng_())
    zero_(lin.weight)
    lin.bias.value[:] = [1.0, -2.0]
    out = lin(ad.Tensor(rng_(1).normal(size=(4, 3)))).value
    np.testing.assert_array_equal(out, np.tile([1.0, -2.0], (4, 1)))
    with pytest.raises(DomainError):
        lin(ad.Tensor(np.ones((4, 2))))


def test_mlp_block_zero_output_layer_is_identity():
    blk = MLPBlock(6, rng_(), dropout=0.5)
    zero_(blk.f.fc2.weight, blk.f.fc2.bias)
    x = ad.Tensor(rng_(1).normal(size=(5, 6)))
    np.testing.assert_array_equal(blk(x, Context(training=True)).value, x.value)


def test_diffusion_block_zero_output_layer_is_identity():
    blk = DiffusionBlock(4, rng_())
    zero_(blk.f.fc2.weight, blk.f.fc2.bias)
    x = ad.Tensor(rng_(1).normal(size=(8, 4)))
    np.testing.assert_array_equal(blk(x, Context(), FakeBundle(small_basis())).value, x.value)


def test_diffusion_times_positive_and_spread():
    t = DiffusionBlock(16, rng_()).times().value
    assert np.all(t > 0)
    np.testing.assert_allclose([t[0], t[-1]], [1e-3, 1.0], rtol=1e-10)


def test_eval_mode_is_deterministic():
    blk = MLPBlock(6, rng_(), dropout=0.5)
    x = ad.Tensor(rng_(1).normal(size=(5, 6)))
    a = blk(x, Context(training=False, rng=rng_(1))).value
    b = blk(x, Context(training=False, rng=rng_(2))).value
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------- patch pooling and upsampling


def test_patch_aggregate_singleton_patches_apply_h():
    agg = PatchAggregate(3, rng_())
    x = ad.Tensor(rng_(1).normal(size=(4, 3)))
    part = Partitioning(np.arange(4), np.arange(4))
    np.testing.assert_allclose(agg(x, part).value, agg.h(x).value, rtol=1e-14)


def test_patch_aggregate_identical_members_equal_one_member():
    agg = PatchAggregate(3, rng_())
    row = rng_(1).normal(size=3)
    x = ad.Tensor(np.vstack([row, row, row, rng_(2).normal(size=3)]))
    part = Partitioning(np.array([0, 3]), np.array([0, 0, 0, 1]))
    tokens = agg(x, part).value
    np.testing.assert_allclose(tokens[0], agg.h(ad.Tensor(row[None])).value[0], rtol=1e-12)


def test_patch_to_node_and_multires_sum():
    a = Partitioning(np.array([0, 2]), np.array([0, 0, 1]))
    b = Partitioning(np.array([0, 1, 2]), np.array([0, 1, 2]))
    xa = ad.Tensor([[1.0], [2.0]])
    xb = ad.Tensor([[10.0], [20.0], [30.0]])
    np.testing.assert_array_equal(patch_to_node(xa, a).value, [[1.0], [1.0], [2.0]])
    np.testing.assert_array_equal(multires_to_node([xa, xb], [a, b]).value, [[11.0], [21.0], [32.0]])
    with pytest.raises(DomainError):
        patch_to_node(xb, a)
    with pytest.raises(DomainError):
        multires_to_node([xa], [a, b])


# ---------------------------------------------------------------- attention


def test_attention_permutation_equivariant():
    mha = MultiHeadAttention(8, 2, rng_())
    x = rng_(1).normal(size=(6, 8))
    perm = rng_(2).permutation(6)
    a = mha(ad.Tensor(x)).value
    b = mha(ad.Tensor(x[perm])).value
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def test_zero_radius_mask_is_self_attention_only():
    mha = MultiHeadAttention(8, 4, rng_())
    x = ad.Tensor(rng_(1).normal(size=(5, 8)))
    g = rng_(2).uniform(1, 2, size=(5, 5))
    g = g + g.T
    np.fill_diagonal(g, 0.0)
    out = mha(x, mask=build_mask(g, 0.0)).value
    np.testing.assert_allclose(out, mha.out(mha.v(x)).value, atol=1e-12)


def test_single_token_attention():
    mha = MultiHeadAttention(4, 2, rng_())
    x = ad.Tensor(rng_(1).normal(size=(1, 4)))
    np.testing.assert_allclose(mha(x).value, mha.out(mha.v(x)).value, atol=1e-14)


def test_cross_attention_single_node_broadcasts_its_value():
    ca = CrossAttentionInteract(4, 2, rng_())
    f = ad.Tensor(rng_(1).normal(size=(3, 4)))
    node = ad.Tensor(rng_(2).normal(size=(1, 4)))
    v = ca.attn.out(ca.attn.v(ca.ln_kv(node))).value
    expect = ca.ffn(ca.ln_out(ad.Tensor(f.value + v))).value
    np.testing.assert_allclose(ca(f, node).value, expect, atol=1e-12)


def test_mask_shape_checked():
    mha = MultiHeadAttention(4, 2, rng_())
    with pytest.raises(DomainError):
        mha(ad.Tensor(np.ones((3, 4))), mask=np.zeros((2, 2)))


# ---------------------------------------------------------------- finite-difference checks of whole layers


def _check_module(fn, module):
    params = list(module.named_parameters().values())
    err = ad.gradient_check(lambda: projected(fn()), params)
    assert err <= TOL, err


def test_grad_transformer_block_with_mask():
    blk = TransformerBlock(4, 2, rng_())
    x = ad.parameter(rng_(1).normal(size=(5, 4)))
    g = np.abs(rng_(2).normal(size=(5, 5)))
    mask = build_mask(g + g.T, 1.5)
    _check_module(lambda: blk(x, mask), blk)
    assert ad.gradient_check(lambda: projected(blk(x, mask)), [x]) <= TOL


def test_grad_cross_attention_and_pooling():
    ca = CrossAttentionInteract(4, 2, rng_())
    agg = PatchAggregate(4, rng_(3))
    part = Partitioning(np.array([0, 3]), np.array([0, 0, 0, 1, 1, 1]))
    x = ad.parameter(rng_(1).normal(size=(6, 4)))
    _check_module(lambda: ca(agg(x, part), x), ca)
    _check_module(lambda: ca(agg(x, part), x), agg)
    assert ad.gradient_check(lambda: projected(ca(agg(x, part), x)), [x]) <= TOL


def test_grad_diffusion_block():
    blk = DiffusionBlock(3, rng_())
    bundle = FakeBundle(small_basis())
    x = ad.parameter(rng_(1).normal(size=(8, 3)))
    _check_module(lambda: blk(x, Context(), bundle), blk)
    assert ad.gradient_check(lambda: projected(blk(x, Context(), bundle)), [x]) <= TOL


def test_grad_mlp_block():
    blk = MLPBlock(4, rng_())
    x = ad.Tensor(rng_(1).normal(size=(6, 4)) + 0.1)
    _check_module(lambda: blk(x, Context()), blk)

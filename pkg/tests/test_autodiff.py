import numpy as np
import pytest

from geotok import autodiff as ad
from geotok.errors import DomainError, TapeError, TrainingError

TOL = 1e-6


def rng_(seed=0):
    return np.random.default_rng(seed)


def projected(out, seed=99):
    """Scalar ``sum(out * R)`` with a fixed random ``R`` so every output entry matters."""
    r = rng_(seed).normal(size=out.shape)
    return ad.total(ad.mul(out, ad.Tensor(r)))


def check(fn, *tensors):
    err = ad.gradient_check(lambda: projected(fn()), list(tensors))
    assert err <= TOL, err


# ---------------------------------------------------------------- gradient checks per primitive


def test_grad_add_broadcast():
    a, b = ad.parameter(rng_(0).normal(size=(4, 3))), ad.parameter(rng_(1).normal(size=(1, 3)))
    check(lambda: ad.add(a, b), a, b)


def test_grad_mul_broadcast():
    a, b = ad.parameter(rng_(0).normal(size=(4, 3))), ad.parameter(rng_(1).normal(size=(3,)))
    check(lambda: ad.mul(a, b), a, b)


def test_grad_scale_and_sub():
    a, b = ad.parameter(rng_(0).normal(size=(3, 2))), ad.parameter(rng_(1).normal(size=(3, 2)))
    check(lambda: ad.scale(a, -2.5) - b, a, b)


def test_grad_matmul_transpose():
    a, b = ad.parameter(rng_(0).normal(size=(4, 3))), ad.parameter(rng_(1).normal(size=(4, 5)))
    check(lambda: a.T @ b, a, b)


@pytest.mark.parametrize("op", [ad.exp, ad.gelu, ad.softplus])
def test_grad_smooth_unary(op):
    a = ad.parameter(rng_(2).normal(size=(5, 3)))
    check(lambda: op(a), a)


def test_grad_relu_away_from_kink():
    v = rng_(3).normal(size=(5, 4))
    v[np.abs(v) < 0.05] = 0.5
    a = ad.parameter(v)
    check(lambda: ad.relu(a), a)


def test_grad_total_and_mean_rows():
    a = ad.parameter(rng_(4).normal(size=(6, 3)))
    check(lambda: ad.mean_rows(a), a)
    assert ad.gradient_check(lambda: ad.total(ad.exp(a)), [a]) <= TOL


def test_grad_softmax_rows_with_mask():
    a = ad.parameter(rng_(5).normal(size=(4, 4)))
    mask = np.where(rng_(6).random((4, 4)) < 0.3, -1e9, 0.0)
    np.fill_diagonal(mask, 0.0)
    check(lambda: ad.softmax_rows(a, mask), a)


def test_grad_layer_norm():
    x = ad.parameter(rng_(7).normal(size=(5, 6)))
    g = ad.parameter(rng_(8).normal(size=(6,)))
    b = ad.parameter(rng_(9).normal(size=(6,)))
    check(lambda: ad.layer_norm(x, g, b), x, g, b)


def test_grad_dropout_fixed_mask():
    a = ad.parameter(rng_(10).normal(size=(6, 4)))
    check(lambda: ad.dropout(a, 0.3, np.random.default_rng(0), True), a)


def test_grad_structural_ops():
    a = ad.parameter(rng_(11).normal(size=(5, 3)))
    b = ad.parameter(rng_(12).normal(size=(5, 2)))
    check(lambda: ad.concat([a, b], axis=1), a, b)
    check(lambda: ad.concat([a, ad.slice_cols(a, 1, 3)], axis=1), a)
    check(lambda: ad.gather_rows(a, [0, 4, 4, 2]), a)


def test_grad_segment_ops():
    seg = np.array([0, 1, 0, 2, 1, 2, 2])
    a = ad.parameter(rng_(13).normal(size=(7, 3)))
    check(lambda: ad.segment_sum(a, seg, 3), a)
    check(lambda: ad.segment_softmax(a, seg, 3), a)


def test_grad_spectral_diffuse():
    r = rng_(14)
    q, _ = np.linalg.qr(r.normal(size=(8, 5)))
    mass = r.uniform(0.5, 1.5, 8)
    phi = q / np.sqrt(mass)[:, None]
    lam = np.sort(r.uniform(0, 4, 5))
    x = ad.parameter(r.normal(size=(8, 3)))
    t = ad.parameter(np.array([0.05, 0.3, 1.0]))
    check(lambda: ad.spectral_diffuse(x, t, lam, phi, mass), x, t)


def test_grad_cross_entropy():
    z = ad.parameter(rng_(15).normal(size=(6, 4)))
    labels = np.array([0, 3, 1, 1, 2, 0])
    assert ad.gradient_check(lambda: ad.cross_entropy(z, labels), [z]) <= TOL


def test_grad_composite_graph_with_reuse():
    w = ad.parameter(rng_(16).normal(size=(3, 3)))
    x = ad.Tensor(rng_(17).normal(size=(4, 3)))

    def fn():
        h = ad.gelu(x @ w)
        return ad.layer_norm(h + x @ w, ad.Tensor(np.ones(3)), ad.Tensor(np.zeros(3)))

    check(fn, w)


# ---------------------------------------------------------------- forward values


def test_softmax_rows_masked_entries_vanish():
    a = ad.Tensor(np.zeros((2, 3)))
    mask = np.array([[0.0, -1e9, 0.0], [0.0, 0.0, 0.0]])
    y = ad.softmax_rows(a, mask).value
    np.testing.assert_allclose(y[0], [0.5, 0.0, 0.5], atol=1e-15)
    np.testing.assert_allclose(y.sum(axis=1), 1.0)


def test_segment_softmax_sums_to_one():
    seg = np.array([2, 0, 0, 1, 2, 2])
    y = ad.segment_softmax(ad.Tensor(rng_(18).normal(size=(6, 4)) * 30), seg, 3).value
    sums = np.zeros((3, 4))
    np.add.at(sums, seg, y)
    np.testing.assert_allclose(sums, 1.0, rtol=1e-12)
    np.testing.assert_array_equal(y[3], np.ones(4))


def test_layer_norm_output_statistics():
    y = ad.layer_norm(ad.Tensor(rng_(19).normal(3, 5, size=(4, 16))), ad.Tensor(np.ones(16)),
                      ad.Tensor(np.zeros(16))).value
    np.testing.assert_allclose(y.mean(axis=1), 0, atol=1e-12)
    np.testing.assert_allclose(y.std(axis=1), 1, rtol=1e-5)


def test_gelu_reference_values():
    y = ad.gelu(ad.Tensor([-1.0, 0.0, 1.0])).value
    np.testing.assert_allclose(y, [-0.15865525393145707, 0.0, 0.8413447460685429], rtol=1e-14)


def test_cross_entropy_uniform_logits():
    loss = ad.cross_entropy(ad.Tensor(np.zeros((3, 4))), [0, 1, 2])
    assert loss.value == pytest.approx(np.log(4.0), rel=1e-15)


def test_dropout_expectation_preserved():
    x = ad.Tensor(np.ones(10_000))
    means = [ad.dropout(x, 0.5, np.random.default_rng(s), True).value.mean() for s in range(20)]
    assert abs(np.mean(means) - 1.0) <= 0.02


def test_dropout_eval_is_identity():
    x = ad.Tensor(rng_(20).normal(size=(3, 3)))
    assert ad.dropout(x, 0.5, rng_(0), training=False) is x
    with pytest.raises(DomainError):
        ad.dropout(x, 1.0, rng_(0), True)


# ---------------------------------------------------------------- tape behaviour


def test_backward_accumulates_over_shared_leaf():
    a = ad.parameter([2.0])
    y = ad.total(a * a + a * 3.0)
    y.backward()
    np.testing.assert_allclose(a.grad, [7.0])


def test_second_backward_raises():
    a = ad.parameter([1.0, 2.0])
    y = ad.total(ad.exp(a))
    y.backward()
    with pytest.raises(TapeError):
        y.backward()


def test_backward_requires_scalar():
    a = ad.parameter(np.ones((2, 2)))
    with pytest.raises(DomainError):
        ad.exp(a).backward()


def test_no_grad_records_nothing():
    a = ad.parameter([1.0])
    with ad.no_grad():
        y = ad.exp(a)
    assert not y.requires_grad and y.is_leaf
    assert ad.exp(a).requires_grad


def test_shape_errors():
    with pytest.raises(DomainError):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))
    with pytest.raises(DomainError):
        ad.add(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((3, 2))))
    with pytest.raises(DomainError):
        ad.cross_entropy(ad.Tensor(np.ones((2, 3))), [0, 3])
    with pytest.raises(DomainError):
        ad.segment_softmax(ad.Tensor(np.ones((3, 1))), [0, 0, 2], 3)


# ---------------------------------------------------------------- Adam


def test_adam_first_step_value():
    p = ad.parameter([1.0, -2.0])
    opt = ad.Adam({"p": p}, lr=1e-3)
    p.grad = np.array([0.5, -3.0])
    opt.step()
    # bias-corrected first step moves each coordinate by lr * sign(g)
    np.testing.assert_allclose(p.value, [1.0 - 1e-3, -2.0 + 1e-3], rtol=0, atol=1e-10)


def test_adam_zero_gradient_no_move():
    p = ad.parameter([0.3, 0.4])
    opt = ad.Adam({"p": p})
    for _ in range(5):
        opt.zero_grad()
        opt.step()
    np.testing.assert_array_equal(p.value, [0.3, 0.4])


def test_adam_constant_gradient_monotone_drift():
    p = ad.parameter([0.0])
    opt = ad.Adam({"p": p}, lr=0.01)
    trace = []
    for _ in range(20):
        p.grad = np.array([1.0])
        opt.step()
        trace.append(p.value[0])
    assert np.all(np.diff(trace) < 0)


def test_adam_learning_rate_schedule():
    opt = ad.Adam({"p": ad.parameter([0.0])}, lr=1e-3, decay_every=50, decay_factor=0.5)
    lrs = []
    for epoch in (0, 49, 50, 99, 100, 199):
        opt.set_epoch(epoch)
        lrs.append(opt.lr)
    np.testing.assert_allclose(lrs, [1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4, 1.25e-4])


def test_adam_rejects_nonfinite_gradient():
    p = ad.parameter([0.0, 0.0])
    opt = ad.Adam({"layer.weight": p})
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(TrainingError, match="layer.weight"):
        opt.step()


def test_adam_minimizes_quadratic():
    p = ad.parameter([3.0, -2.0])
    opt = ad.Adam({"p": p}, lr=0.1)
    for _ in range(300):
        opt.zero_grad()
        ad.total(p * p).backward()
        opt.step()
    assert np.abs(p.value).max() < 1e-2

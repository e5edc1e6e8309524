import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splice_mfcn.tensor import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    MaxPool2,
    Param,
    ReLU,
    ShapeError,
    add,
    add_backward,
    bilinear_init,
    bilinear_kernel,
    finite_diff_check,
    sgd_step,
    weighted_softmax_ce,
)
from splice_mfcn import gradsuite

from conftest import naive_conv2d, naive_transposed_conv


def _conv(cin, cout, k, pad, stride, rng):
    layer = Conv2d(cin, cout, k, pad, stride)
    layer.weight.data[...] = rng.standard_normal(layer.weight.shape)
    layer.bias.data[...] = rng.standard_normal(cout)
    return layer


# -- conv2d ---------------------------------------------------------------

def test_conv_box_sum():
    layer = Conv2d(1, 1, 3, 1)
    layer.weight.data[...] = 1
    out = layer.forward(np.ones((1, 1, 3, 3)))
    np.testing.assert_array_equal(out[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_conv_identity_1x1(rng):
    layer = Conv2d(1, 1, 1, 0)
    layer.weight.data[...] = 1
    x = rng.standard_normal((2, 1, 5, 4))
    np.testing.assert_array_equal(layer.forward(x), x)


@pytest.mark.parametrize("k,pad,stride", [(3, 1, 1), (3, 0, 2), (1, 0, 1), (2, 1, 2)])
def test_conv_matches_naive(rng, k, pad, stride):
    layer = _conv(3, 4, k, pad, stride, rng)
    x = rng.standard_normal((2, 3, 7, 6))
    np.testing.assert_allclose(
        layer.forward(x), naive_conv2d(x, layer.weight.data, layer.bias.data, pad, stride), rtol=1e-12, atol=1e-12
    )


def test_conv_output_size():
    layer = Conv2d(1, 1, 3, 1, 2)
    assert layer.forward(np.zeros((1, 1, 9, 8))).shape == (1, 1, 5, 4)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError, match="input channels"):
        Conv2d(3, 4).forward(np.zeros((1, 2, 8, 8)))


def test_conv_gradcheck(rng):
    layer = _conv(3, 4, 3, 1, 1, rng)
    x = rng.standard_normal((2, 3, 8, 8))
    r = rng.standard_normal((2, 4, 8, 8))

    def f():
        return float((layer.forward(x) * r).sum())

    layer.forward(x)
    gx = layer.backward(r)
    assert finite_diff_check(f, x, gx).max_rel_error <= 1e-4
    gw = layer.weight.grad.copy()
    assert finite_diff_check(f, layer.weight.data, gw).max_rel_error <= 1e-4


def test_conv_adjoint(rng):
    layer = _conv(3, 5, 3, 1, 2, rng)
    layer.bias.data[...] = 0
    x = rng.standard_normal((2, 3, 8, 8))
    y_shape = layer.forward(x).shape
    y = rng.standard_normal(y_shape)
    lhs = float((layer.forward(x) * y).sum())
    rhs = float((x * layer.backward(y)).sum())
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


# -- transposed conv ------------------------------------------------------

@pytest.mark.parametrize("factor", [2, 8])
def test_transposed_conv_matches_scatter_oracle(rng, factor):
    layer = ConvTranspose2d(2, 3, factor)
    layer.weight.data[...] = rng.standard_normal(layer.weight.shape)
    layer.bias.data[...] = rng.standard_normal(3)
    x = rng.standard_normal((2, 2, 3, 4))
    out = layer.forward(x)
    assert out.shape == (2, 3, 3 * factor, 4 * factor)
    np.testing.assert_allclose(out, naive_transposed_conv(x, layer.weight.data, layer.bias.data, factor),
                               rtol=1e-12, atol=1e-12)


def test_transposed_conv_constant_interior():
    layer = ConvTranspose2d(1, 1, 2)
    bilinear_init(layer)
    out = layer.forward(np.full((1, 1, 5, 5), 7.0))
    np.testing.assert_allclose(out[0, 0, 1:-1, 1:-1], 7.0, rtol=0, atol=1e-12)


def test_transposed_conv_single_pixel():
    layer = ConvTranspose2d(1, 1, 2)
    bilinear_init(layer)
    out = layer.forward(np.full((1, 1, 1, 1), 3.0))
    np.testing.assert_allclose(out[0, 0], bilinear_kernel(4)[1:3, 1:3] * 3.0)
    # central 2x2 of the 4x4 bilinear kernel is 0.75 * 0.75 everywhere
    np.testing.assert_allclose(out[0, 0], np.full((2, 2), 0.5625 * 3.0))


def test_transposed_conv_is_conv_adjoint(rng):
    factor = 2
    up = ConvTranspose2d(2, 3, factor)
    up.weight.data[...] = rng.standard_normal(up.weight.shape)
    down = Conv2d(3, 2, kernel=2 * factor, pad=factor // 2, stride=factor)
    down.weight.data[...] = up.weight.data
    x = rng.standard_normal((1, 2, 4, 5))
    y = rng.standard_normal((1, 3, 8, 10))
    lhs = float((up.forward(x) * y).sum())
    rhs = float((x * down.forward(y)).sum())
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)
    # the transposed conv forward is exactly the conv input-gradient
    np.testing.assert_allclose(up.forward(x), down.backward(x), rtol=1e-12, atol=1e-12)


def test_transposed_conv_unsupported_factor():
    with pytest.raises(ValueError, match="factor"):
        ConvTranspose2d(2, 2, 4)


# -- batchnorm ------------------------------------------------------------

def test_batchnorm_two_point():
    bn = BatchNorm2d(1, eps=0.0)
    out = bn.forward(np.array([1.0, 3.0]).reshape(1, 1, 1, 2))
    np.testing.assert_allclose(out.ravel(), [-1.0, 1.0])


def test_batchnorm_affine():
    bn = BatchNorm2d(1, eps=0.0)
    bn.scale.data[...] = 2
    bn.shift.data[...] = 5
    x = np.array([-1.0, 1.0]).reshape(1, 1, 1, 2)
    np.testing.assert_allclose(bn.forward(x).ravel(), 2 * x.ravel() + 5)


def test_batchnorm_training_stats(rng):
    bn = BatchNorm2d(3)
    out = bn.forward(rng.standard_normal((4, 3, 5, 5)) * 3 + 2)
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-5)


def test_batchnorm_running_update(rng):
    bn = BatchNorm2d(2)
    x = rng.standard_normal((3, 2, 4, 4))
    bn.forward(x)
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))


def test_batchnorm_single_value_rejected():
    with pytest.raises(ValueError, match="variance"):
        BatchNorm2d(2).forward(np.zeros((1, 2, 1, 1)))


def test_batchnorm_inference_leaves_running_stats(rng):
    bn = BatchNorm2d(3)
    bn.forward(rng.standard_normal((2, 3, 4, 4)))
    bn.training = False
    before = (bn.running_mean.copy(), bn.running_var.copy())
    x = rng.standard_normal((2, 3, 4, 4))
    a = bn.forward(x)
    b = bn.forward(x)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(bn.running_mean, before[0])
    np.testing.assert_array_equal(bn.running_var, before[1])
    # pure affine in the running statistics
    expected = (x - before[0][None, :, None, None]) / np.sqrt(before[1][None, :, None, None] + bn.eps)
    np.testing.assert_allclose(a, expected, rtol=1e-12)


def test_batchnorm_gradcheck(rng):
    assert gradsuite.check_batchnorm(rng) <= 1e-4


# -- relu / maxpool / add -------------------------------------------------

def test_relu_definition():
    r = ReLU()
    np.testing.assert_array_equal(r.forward(np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)).ravel(), [0, 0, 2])
    np.testing.assert_array_equal(r.backward(np.ones((1, 1, 1, 3))).ravel(), [0, 0, 1])


def test_relu_all_negative(rng):
    r = ReLU()
    x = -rng.random((2, 2, 3, 3)) - 0.1
    assert not r.forward(x).any()
    assert not r.backward(np.ones_like(x)).any()


def test_relu_gradcheck(rng):
    assert gradsuite.check_relu(rng) <= 1e-4


def test_maxpool_window():
    p = MaxPool2()
    out = p.forward(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    assert out.item() == 4
    np.testing.assert_array_equal(p.backward(np.ones((1, 1, 1, 1)))[0, 0], [[0, 0], [0, 1]])


def test_maxpool_tie_goes_to_first():
    p = MaxPool2()
    p.forward(np.full((1, 1, 2, 2), 5.0))
    np.testing.assert_array_equal(p.backward(np.full((1, 1, 1, 1), 2.0))[0, 0], [[2, 0], [0, 0]])


def test_maxpool_odd_dims():
    with pytest.raises(ShapeError, match="even"):
        MaxPool2().forward(np.zeros((1, 1, 3, 4)))


def test_maxpool_gradcheck(rng):
    assert gradsuite.check_maxpool(rng) <= 1e-4


def test_add_properties(rng):
    a, b = rng.standard_normal((2, 1, 2, 3, 3))
    np.testing.assert_array_equal(add(a, np.zeros_like(a)), a)
    np.testing.assert_array_equal(add(a, b), add(b, a))
    g = rng.standard_normal(a.shape)
    ga, gb = add_backward(g)
    np.testing.assert_array_equal(ga, g)
    np.testing.assert_array_equal(gb, g)
    with pytest.raises(ShapeError):
        add(a, b[:, :, :2])


# -- loss -----------------------------------------------------------------

def test_ce_uniform_logits():
    loss, _ = weighted_softmax_ce(np.zeros((1, 2, 3, 3)), np.zeros((1, 3, 3), int), (1, 1))
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_ce_saturated():
    logits = np.zeros((1, 2, 2, 2))
    t = np.array([[[0, 1], [1, 0]]])
    logits[0, 0][t[0] == 0] = 20
    logits[0, 1][t[0] == 1] = 20
    assert weighted_softmax_ce(logits, t, (1, 1))[0] < 1e-8


def test_ce_scalar_oracle(rng):
    logits = rng.standard_normal((1, 2, 2, 2))
    t = np.array([[[0, 1], [0, 0]]])
    w = (0.5556, 5.0)
    total = 0.0
    for i in range(2):
        for j in range(2):
            z0, z1 = logits[0, 0, i, j], logits[0, 1, i, j]
            zt = z1 if t[0, i, j] else z0
            total += w[t[0, i, j]] * -(zt - math.log(math.exp(z0) + math.exp(z1)))
    assert weighted_softmax_ce(logits, t, w)[0] == pytest.approx(total / 4, abs=1e-12)


def test_ce_grad_tangent(rng):
    _, g = weighted_softmax_ce(rng.standard_normal((2, 2, 4, 4)), rng.integers(0, 2, (2, 4, 4)), (0.7, 3.0))
    np.testing.assert_allclose(g.sum(axis=1), 0, atol=1e-15)


def test_ce_bad_target():
    with pytest.raises(ValueError, match="0 or 1"):
        weighted_softmax_ce(np.zeros((1, 2, 2, 2)), np.full((1, 2, 2), 2), (1, 1))


def test_ce_gradcheck(rng):
    assert gradsuite.check_softmax_ce(rng) <= 1e-4


# -- sgd ------------------------------------------------------------------

def test_sgd_vanilla():
    p = Param(np.array([1.0, -2.0]))
    p.grad[...] = [0.5, 1.0]
    sgd_step([p], lr=0.1)
    np.testing.assert_allclose(p.data, [0.95, -2.1])
    assert not p.grad.any()


def test_sgd_weight_decay_only():
    p = Param(np.array([1.0]))
    sgd_step([p], lr=0.0001, momentum=0.0, weight_decay=0.0005)
    assert p.data[0] == pytest.approx(1 - 5e-8, abs=1e-16)


def test_sgd_bias_not_decayed():
    p = Param(np.array([1.0]), decay=False)
    sgd_step([p], lr=0.1, weight_decay=0.5)
    assert p.data[0] == 1.0


def test_sgd_momentum_unrolled():
    p = Param(np.array([0.0]))
    g, lr = 2.0, 0.01
    for _ in range(2):
        p.grad[...] = g
        sgd_step([p], lr=lr, momentum=0.9)
    assert p.data[0] == pytest.approx(-lr * g * (1 + 1.9), rel=1e-12)


def test_momentum_buffers_start_at_zero():
    p = Param(np.ones((3, 3)))
    assert not p.velocity.any()
    assert p.grad.shape == p.data.shape == p.velocity.shape


# -- finite differences ---------------------------------------------------

def test_fd_exact_on_linear(rng):
    a = rng.standard_normal(10)
    x = rng.standard_normal(10)
    assert finite_diff_check(lambda: float(a @ x), x, a).max_rel_error <= 1e-8


def test_fd_detects_corruption(rng):
    layer = _conv(2, 3, 3, 1, 1, rng)
    x = rng.standard_normal((1, 2, 5, 5))
    r = rng.standard_normal((1, 3, 5, 5))
    layer.forward(x)
    gx = layer.backward(r) * 1.01
    rep = finite_diff_check(lambda: float((layer.forward(x) * r).sum()), x, gx)
    assert rep.max_rel_error >= 5e-3


@settings(max_examples=15, deadline=None)
@given(
    n=st.integers(1, 2), cin=st.integers(1, 3), cout=st.integers(1, 3),
    h=st.integers(3, 7), w=st.integers(3, 7), k=st.sampled_from([1, 3]),
    stride=st.integers(1, 2), seed=st.integers(0, 2**16),
)
def test_conv_gradcheck_random_shapes(n, cin, cout, h, w, k, stride, seed):
    rng = np.random.default_rng(seed)
    layer = _conv(cin, cout, k, k // 2, stride, rng)
    x = rng.standard_normal((n, cin, h, w))
    r = rng.standard_normal(layer.forward(x).shape)

    def f():
        return float((layer.forward(x) * r).sum())

    layer.forward(x)
    gx = layer.backward(r)
    assert finite_diff_check(f, x, gx).max_rel_error <= 1e-4
    assert finite_diff_check(f, layer.bias.data, layer.bias.grad.copy()).max_rel_error <= 1e-4


def test_determinism(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    outs = []
    for _ in range(2):
        r = np.random.default_rng(7)
        layer = _conv(3, 4, 3, 1, 1, r)
        y = layer.forward(x)
        outs.append((y, layer.backward(np.ones_like(y))))
    np.testing.assert_array_equal(outs[0][0], outs[1][0])
    np.testing.assert_array_equal(outs[0][1], outs[1][1])

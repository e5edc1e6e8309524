"""Finite-difference checks for every layer type and a tiny end-to-end MFCN."""

from collections import OrderedDict

import numpy as np

from .model import ModelConfig, build_model
from .tensor import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    MaxPool2,
    ReLU,
    finite_diff_check,
    weighted_softmax_ce,
)


def _layer_check(layer, x, rng, eps):
    """Check input and parameter gradients of f = <layer(x), R>."""
    r = rng.standard_normal(layer.forward(x).shape)

    def f():
        return float((layer.forward(x) * r).sum())

    for p in layer.params().values():
        p.zero_grad()
    layer.forward(x)
    gx = layer.backward(r)
    worst = finite_diff_check(f, x, gx, eps).max_rel_error
    grads = {name: p.grad.copy() for name, p in layer.params().items()}
    for name, p in layer.params().items():
        worst = max(worst, finite_diff_check(f, p.data, grads[name], eps).max_rel_error)
    return worst


def check_conv2d(rng, eps=1e-5):
    layer = Conv2d(3, 4, kernel=3, pad=1)
    layer.weight.data[...] = rng.standard_normal(layer.weight.shape)
    layer.bias.data[...] = rng.standard_normal(4)
    worst = _layer_check(layer, rng.standard_normal((2, 3, 8, 8)), rng, eps)
    strided = Conv2d(2, 3, kernel=3, pad=0, stride=2)
    strided.weight.data[...] = rng.standard_normal(strided.weight.shape)
    worst = max(worst, _layer_check(strided, rng.standard_normal((1, 2, 7, 7)), rng, eps))
    score = Conv2d(4, 2, kernel=1, pad=0)
    score.weight.data[...] = rng.standard_normal(score.weight.shape)
    return max(worst, _layer_check(score, rng.standard_normal((2, 4, 5, 5)), rng, eps))


def check_batchnorm(rng, eps=1e-5):
    layer = BatchNorm2d(3)
    layer.scale.data[...] = rng.uniform(0.5, 2.0, 3)
    layer.shift.data[...] = rng.standard_normal(3)
    layer.track_running_stats = False
    worst = _layer_check(layer, rng.standard_normal((2, 3, 4, 5)) * 2 + 1, rng, eps)
    layer.training = False
    layer.running_mean[...] = rng.standard_normal(3)
    layer.running_var[...] = rng.uniform(0.5, 2.0, 3)
    return max(worst, _layer_check(layer, rng.standard_normal((2, 3, 4, 5)), rng, eps))


def check_relu(rng, eps=1e-5):
    x = rng.standard_normal((2, 3, 5, 5))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    return _layer_check(ReLU(), x, rng, eps)


def check_maxpool(rng, eps=1e-5):
    # distinct values spaced well beyond eps so no window changes its argmax
    x = rng.permutation(72).astype(np.float64).reshape(1, 2, 6, 6) * 0.1
    return _layer_check(MaxPool2(), x, rng, eps)


def check_transposed_conv(rng, eps=1e-5):
    worst = 0.0
    for factor in (2, 8):
        layer = ConvTranspose2d(2, 2, factor)
        layer.weight.data[...] = rng.standard_normal(layer.weight.shape)
        layer.bias.data[...] = rng.standard_normal(2)
        worst = max(worst, _layer_check(layer, rng.standard_normal((2, 2, 3, 4)), rng, eps))
    return worst


def check_softmax_ce(rng, eps=1e-5):
    logits = rng.standard_normal((2, 2, 4, 4)) * 2
    target = (rng.random((2, 4, 4)) > 0.6).astype(int)
    weights = (0.5556, 5.0)

    def f():
        return weighted_softmax_ce(logits, target, weights)[0]

    _, grad = weighted_softmax_ce(logits, target, weights)
    return finite_diff_check(f, logits, grad, eps).max_rel_error


def check_end_to_end(rng, eps=1e-5, seed=0):
    """Total MFCN loss vs finite differences on widths [2]*5, 32x32 inputs."""
    model = build_model(ModelConfig(block_widths=[2] * 5, input_size=(32, 32)), seed=seed)
    for bn in model.batchnorms():
        bn.track_running_stats = False
    x = rng.random((2, 3, 32, 32)) - 0.5
    gs = (rng.random((2, 32, 32)) > 0.7).astype(int)
    ge = (rng.random((2, 32, 32)) > 0.85).astype(int)
    ws, we = (0.7, 2.0), (0.6, 3.0)

    def f():
        o = model.forward(x)
        return weighted_softmax_ce(o["surface"], gs, ws)[0] + weighted_softmax_ce(o["edge"], ge, we)[0]

    model.zero_grad()
    o = model.forward(x)
    _, g_s = weighted_softmax_ce(o["surface"], gs, ws)
    _, g_e = weighted_softmax_ce(o["edge"], ge, we)
    gx = model.backward({"surface": g_s, "edge": g_e})
    grads = {name: p.grad.copy() for name, p in model.named_params().items()}
    worst = finite_diff_check(f, x, gx, eps).max_rel_error
    for name, p in model.named_params().items():
        worst = max(worst, finite_diff_check(f, p.data, grads[name], eps).max_rel_error)
    return worst


LAYER_CHECKS = OrderedDict([
    ("conv2d", check_conv2d),
    ("batchnorm", check_batchnorm),
    ("relu", check_relu),
    ("maxpool2", check_maxpool),
    ("transposed_conv", check_transposed_conv),
    ("softmax_ce", check_softmax_ce),
])

LAYER_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3


def run_suite(seed=0, eps=1e-5):
    """Return ``{check name: (worst relative error, tolerance)}``."""
    results = OrderedDict()
    for name, fn in LAYER_CHECKS.items():
        results[name] = (fn(np.random.default_rng(seed), eps), LAYER_TOLERANCE)
    results["end_to_end_mfcn"] = (check_end_to_end(np.random.default_rng(seed), eps, seed), END_TO_END_TOLERANCE)
    return results

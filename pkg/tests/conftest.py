import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_conv2d(x, w, b, pad, stride):
    n, c, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    for bi in range(n):
        for o in range(cout):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[bi, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[bi, o, i, j] = (patch * w[o]).sum() + b[o]
    return out


def naive_transposed_conv(x, w, b, factor):
    """Scatter each input pixel's kernel into the output, then crop."""
    n, c, h, wd = x.shape
    _, cout, k, _ = w.shape
    full = np.zeros((n, cout, (h - 1) * factor + k, (wd - 1) * factor + k))
    for bi in range(n):
        for ci in range(c):
            for i in range(h):
                for j in range(wd):
                    full[bi, :, i * factor:i * factor + k, j * factor:j * factor + k] += x[bi, ci, i, j] * w[ci]
    p = factor // 2
    return full[:, :, p:p + factor * h, p:p + factor * wd] + b[None, :, None, None]

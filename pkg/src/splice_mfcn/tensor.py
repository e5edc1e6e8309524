"""Layer primitives with explicit forward/backward passes.

Tensors are plain numpy arrays laid out as (batch, channel, height, width).
Each layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``Param.grad`` during ``backward``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class Param:
    """A learnable array with its gradient and SGD momentum buffer."""

    def __init__(self, data, decay=True):
        self.data = data
        self.grad = np.zeros_like(data)
        self.velocity = np.zeros_like(data)
        self.decay = decay

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Param(shape={self.data.shape}, decay={self.decay})"


def _check_4d(x, name="input"):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (n, c, h, w), got shape {x.shape}")


class Conv2d:
    """Square-kernel 2-D convolution (cross-correlation) via im2col."""

    def __init__(self, in_channels, out_channels, kernel=3, pad=1, stride=1, dtype=np.float64):
        if pad < 0 or stride < 1:
            raise ValueError(f"need pad >= 0 and stride >= 1, got pad={pad}, stride={stride}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.pad = pad
        self.stride = stride
        self.weight = Param(np.zeros((out_channels, in_channels, kernel, kernel), dtype=dtype))
        self.bias = Param(np.zeros(out_channels, dtype=dtype), decay=False)
        self._cache = None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def output_size(self, h, w):
        k, p, s = self.kernel, self.pad, self.stride
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x):
        _check_4d(x)
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ShapeError(
                f"conv2d expects {self.in_channels} input channels, got input shape {x.shape}"
            )
        oh, ow = self.output_size(h, w)
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv2d kernel {self.kernel} does not fit input shape {x.shape}")
        k, p, s = self.kernel, self.pad, self.stride
        if k == 1 and p == 0 and s == 1:
            cols = x.reshape(n, c, h * w)
        else:
            xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
            cols = _kernels.im2col(xp, k, s)
        w2 = self.weight.data.reshape(self.out_channels, -1)
        out = np.matmul(w2, cols) + self.bias.data[:, None]
        self._cache = (x.shape, cols)
        return out.reshape(n, self.out_channels, oh, ow)

    def backward(self, grad):
        (n, c, h, w), cols = self._cache
        k, p, s = self.kernel, self.pad, self.stride
        g2 = grad.reshape(n, self.out_channels, -1)
        self.weight.grad += np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(self.weight.shape)
        self.bias.grad += g2.sum(axis=(0, 2))
        w2 = self.weight.data.reshape(self.out_channels, -1)
        dcols = np.matmul(w2.T, g2)
        if k == 1 and p == 0 and s == 1:
            return dcols.reshape(n, c, h, w)
        dxp = _kernels.col2im(dcols, c, h + 2 * p, w + 2 * p, k, s)
        return dxp[:, :, p:p + h, p:p + w] if p else dxp


class ConvTranspose2d:
    """Learned upsampling by an integer factor (kernel 2f, stride f, crop f/2).

    Output spatial dims are exactly ``factor`` times the input dims. The
    weight layout is (in_channels, out_channels, k, k).
    """

    FACTORS = (2, 8)

    def __init__(self, in_channels, out_channels, factor, dtype=np.float64):
        if factor not in self.FACTORS:
            raise ValueError(f"unsupported upsampling factor {factor}; expected one of {self.FACTORS}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.factor = factor
        self.kernel = 2 * factor
        self.crop = factor // 2
        self.weight = Param(np.zeros((in_channels, out_channels, self.kernel, self.kernel), dtype=dtype))
        self.bias = Param(np.zeros(out_channels, dtype=dtype), decay=False)
        self._cache = None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        _check_4d(x)
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ShapeError(
                f"transposed conv expects {self.in_channels} input channels, got input shape {x.shape}"
            )
        f, k, p = self.factor, self.kernel, self.crop
        x2 = x.reshape(n, c, h * w)
        wmat = self.weight.data.reshape(c, -1)
        cols = np.matmul(wmat.T, x2)
        full = _kernels.col2im(cols, self.out_channels, (h - 1) * f + k, (w - 1) * f + k, k, f)
        self._cache = (x.shape, x2)
        out = full[:, :, p:p + f * h, p:p + f * w] + self.bias.data[:, None, None]
        return np.ascontiguousarray(out)

    def backward(self, grad):
        (n, c, h, w), x2 = self._cache
        f, k, p = self.factor, self.kernel, self.crop
        self.bias.grad += grad.sum(axis=(0, 2, 3))
        gp = np.pad(grad, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = _kernels.im2col(gp, k, f)
        self.weight.grad += np.matmul(x2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(self.weight.shape)
        wmat = self.weight.data.reshape(c, -1)
        return np.matmul(wmat, cols).reshape(n, c, h, w)


def bilinear_kernel(size):
    """2-D bilinear interpolation kernel of the given (even or odd) size."""
    factor = (size + 1) // 2
    center = factor - 1 if size % 2 == 1 else factor - 0.5
    og = np.arange(size)
    filt = 1 - np.abs(og - center) / factor
    return np.outer(filt, filt)


def bilinear_init(layer):
    """Channel-diagonal bilinear weights; requires in == out channels."""
    if layer.in_channels != layer.out_channels:
        raise ShapeError("bilinear init needs equal input and output channels")
    layer.weight.data[...] = 0
    kern = bilinear_kernel(layer.kernel)
    for ch in range(layer.in_channels):
        layer.weight.data[ch, ch] = kern


class BatchNorm2d:
    """Per-channel batch normalization with running statistics.

    Running statistics track the biased batch variance with
    ``running <- (1 - momentum) * running + momentum * batch``.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float64):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.scale = Param(np.ones(channels, dtype=dtype), decay=False)
        self.shift = Param(np.zeros(channels, dtype=dtype), decay=False)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.training = True
        self.track_running_stats = True
        self._cache = None

    def params(self):
        return {"scale": self.scale, "shift": self.shift}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x):
        _check_4d(x)
        n, c, h, w = x.shape
        if c != self.channels:
            raise ShapeError(f"batchnorm has {self.channels} channels, got input shape {x.shape}")
        if self.training:
            count = n * h * w
            if count < 2:
                raise ValueError(
                    "batchnorm in training mode needs at least 2 values per channel "
                    f"(got batch*h*w = {count}); variance is undefined"
                )
            mean = x.mean(axis=(0, 2, 3))
            centered = x - mean[None, :, None, None]
            var = (centered * centered).mean(axis=(0, 2, 3))
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = centered * inv_std[None, :, None, None]
            if self.track_running_stats:
                m = self.momentum
                self.running_mean[...] = (1 - m) * self.running_mean + m * mean
                self.running_var[...] = (1 - m) * self.running_var + m * var
            self._cache = (xhat, inv_std)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
            self._cache = (xhat, inv_std)
        return self.scale.data[None, :, None, None] * xhat + self.shift.data[None, :, None, None]

    def backward(self, grad):
        xhat, inv_std = self._cache
        self.scale.grad += (grad * xhat).sum(axis=(0, 2, 3))
        self.shift.grad += grad.sum(axis=(0, 2, 3))
        dxhat = grad * self.scale.data[None, :, None, None]
        if not self.training:
            return dxhat * inv_std[None, :, None, None]
        n, _, h, w = grad.shape
        count = n * h * w
        sum_d = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        return (inv_std[None, :, None, None] / count) * (count * dxhat - sum_d - xhat * sum_dx)


class ReLU:
    def __init__(self):
        self._mask = None

    def params(self):
        return {}

    def forward(self, x):
        # forward reads only locals, so inference-mode calls may run concurrently
        mask = x > 0
        self._mask = mask
        return np.where(mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return np.where(self._mask, grad, 0).astype(grad.dtype, copy=False)


class MaxPool2:
    """2x2 stride-2 max pooling; ties go to the first element in row-major order."""

    def __init__(self):
        self._idx = None

    def params(self):
        return {}

    def forward(self, x):
        _check_4d(x)
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"maxpool2 needs even spatial dims, got input shape {x.shape}")
        out, self._idx = _kernels.maxpool2(x)
        return out

    def backward(self, grad):
        return _kernels.maxpool2_backward(grad, self._idx)


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add needs identical shapes, got {a.shape} and {b.shape}")
    return a + b


def add_backward(grad):
    return grad, grad


def softmax2(logits):
    """Channel softmax for (n, 2, h, w) logits, max-subtracted."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def weighted_softmax_ce(logits, target, weights):
    """Class-weighted per-pixel softmax cross-entropy, averaged over all pixels.

    Parameters
    ----------
    logits : ndarray, shape (n, 2, h, w)
    target : ndarray, shape (n, h, w), values in {0, 1}
    weights : ClassWeights or pair (w_authentic, w_spliced)

    Returns
    -------
    loss : float
    grad : ndarray shaped like ``logits``
    """
    _check_4d(logits, "logits")
    if logits.shape[1] != 2:
        raise ShapeError(f"logits must have exactly 2 channels, got shape {logits.shape}")
    target = np.asarray(target)
    n, _, h, w = logits.shape
    if target.shape != (n, h, w):
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
    if not np.isin(target, (0, 1)).all():
        raise ValueError("target values must be 0 or 1")
    w_auth, w_spl = (float(v) for v in weights)
    if not (w_auth > 0 and w_spl > 0):
        raise ValueError(f"class weights must be positive, got ({w_auth}, {w_spl})")

    t = target.astype(np.intp)
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    z_true = np.take_along_axis(z, t[:, None], axis=1)[:, 0]
    pix_w = np.where(t == 1, w_spl, w_auth).astype(logits.dtype)
    count = n * h * w
    loss = float((pix_w * (logsum - z_true)).sum() / count)

    prob = np.exp(z - logsum[:, None])
    prob[:, 1] -= t
    prob[:, 0] -= 1 - t
    grad = prob * (pix_w / count)[:, None]
    return loss, grad


def sgd_step(params, lr, momentum=0.0, weight_decay=0.0):
    """In-place SGD with momentum; decay applies only to params with ``decay=True``.

    v <- momentum * v + grad + weight_decay * w;  w <- w - lr * v
    """
    for p in params:
        step = p.grad + weight_decay * p.data if (weight_decay and p.decay) else p.grad
        p.velocity *= momentum
        p.velocity += step
        p.data -= lr * p.velocity
        p.zero_grad()


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float
    checked: int = 0
    errors: np.ndarray = field(default=None, repr=False)


def relative_error(analytic, numeric, floor=1e-6):
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def finite_diff_check(f, x, analytic, eps=1e-5, floor=1e-6, indices=None):
    """Compare ``analytic`` against central differences of scalar ``f`` at ``x``.

    ``x`` is perturbed in place and restored. ``indices`` optionally limits
    the check to a subset of flat coordinates.
    """
    flat = x.reshape(-1)
    if not np.shares_memory(flat, x):
        raise ValueError("x must be contiguous so it can be perturbed in place")
    ana = np.asarray(analytic).reshape(-1)
    coords = range(flat.size) if indices is None else indices
    num = np.empty(len(coords))
    got = np.empty(len(coords))
    for j, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        num[j] = (fp - fm) / (2 * eps)
        got[j] = ana[i]
    err = relative_error(got, num, floor)
    worst = int(np.argmax(err)) if err.size else 0
    idx = list(coords)[worst] if err.size else 0
    return GradCheckReport(
        max_rel_error=float(err.max()) if err.size else 0.0,
        worst_index=np.unravel_index(idx, x.shape),
        analytic=float(got[worst]) if err.size else 0.0,
        numeric=float(num[worst]) if err.size else 0.0,
        checked=err.size,
        errors=err,
    )

"""Hot inner loops, each with a numba and a pure-numpy implementation.

The backend is picked once at import time from ``SPLICE_MFCN_BACKEND``
(``numba`` or ``numpy``; default ``numba`` when numba imports cleanly).
im2col uses the numpy strided copy under both backends (it benchmarks
faster); the jitted version is kept for the equivalence tests.
Both paths produce identical results: im2col/maxpool/hole-fill are exact,
and col2im accumulates each output element in the same (ki, kj) order.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_requested = os.environ.get("SPLICE_MFCN_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"SPLICE_MFCN_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

try:
    if _requested != "numba":
        raise ImportError
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

BACKEND = "numba" if HAS_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def im2col_numpy(xp, k, stride):
    n, c, hp, wp = xp.shape
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # (n, c, oh, ow, k, k) -> (n, c, k, k, oh, ow)
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(n, c * k * k, oh * ow)


def col2im_numpy(cols, c, hp, wp, k, stride):
    n = cols.shape[0]
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    cols = cols.reshape(n, c, k, k, oh, ow)
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            xp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += cols[:, :, ki, kj]
    return xp


def maxpool2_numpy(x):
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1).astype(np.int8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, idx


def maxpool2_backward_numpy(grad, idx):
    n, c, oh, ow = grad.shape
    win = np.zeros((n, c, oh, ow, 4), dtype=grad.dtype)
    np.put_along_axis(win, idx[..., None].astype(np.intp), grad[..., None], axis=-1)
    return win.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * oh, 2 * ow)


def border_reach_numpy(background):
    """Background pixels 4-connected to the border through background."""
    bg = background.astype(bool)
    reach = np.zeros_like(bg)
    if bg.size == 0:
        return reach
    reach[0, :] = bg[0, :]
    reach[-1, :] = bg[-1, :]
    reach[:, 0] |= bg[:, 0]
    reach[:, -1] |= bg[:, -1]
    while True:
        grown = reach.copy()
        grown[1:, :] |= reach[:-1, :]
        grown[:-1, :] |= reach[1:, :]
        grown[:, 1:] |= reach[:, :-1]
        grown[:, :-1] |= reach[:, 1:]
        grown &= bg
        if np.array_equal(grown, reach):
            return reach
        reach = grown


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _im2col_nb(xp, k, stride, oh, ow):
        n, c = xp.shape[0], xp.shape[1]
        cols = np.empty((n, c * k * k, oh * ow), dtype=xp.dtype)
        for b in range(n):
            for ch in range(c):
                for ki in range(k):
                    for kj in range(k):
                        row = (ch * k + ki) * k + kj
                        for oy in range(oh):
                            iy = oy * stride + ki
                            base = oy * ow
                            for ox in range(ow):
                                cols[b, row, base + ox] = xp[b, ch, iy, ox * stride + kj]
        return cols

    @njit(cache=True)
    def _col2im_nb(cols, c, hp, wp, k, stride, oh, ow):
        n = cols.shape[0]
        xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
        for b in range(n):
            for ch in range(c):
                for ki in range(k):
                    for kj in range(k):
                        row = (ch * k + ki) * k + kj
                        for oy in range(oh):
                            iy = oy * stride + ki
                            base = oy * ow
                            for ox in range(ow):
                                xp[b, ch, iy, ox * stride + kj] += cols[b, row, base + ox]
        return xp

    @njit(cache=True)
    def _maxpool2_nb(x):
        n, c, h, w = x.shape
        oh, ow = h // 2, w // 2
        out = np.empty((n, c, oh, ow), dtype=x.dtype)
        idx = np.empty((n, c, oh, ow), dtype=np.int8)
        for b in range(n):
            for ch in range(c):
                for i in range(oh):
                    for j in range(ow):
                        best = x[b, ch, 2 * i, 2 * j]
                        arg = 0
                        for q in range(1, 4):
                            v = x[b, ch, 2 * i + q // 2, 2 * j + q % 2]
                            if v > best:
                                best = v
                                arg = q
                        out[b, ch, i, j] = best
                        idx[b, ch, i, j] = arg
        return out, idx

    @njit(cache=True)
    def _maxpool2_backward_nb(grad, idx):
        n, c, oh, ow = grad.shape
        gx = np.zeros((n, c, 2 * oh, 2 * ow), dtype=grad.dtype)
        for b in range(n):
            for ch in range(c):
                for i in range(oh):
                    for j in range(ow):
                        q = idx[b, ch, i, j]
                        gx[b, ch, 2 * i + q // 2, 2 * j + q % 2] = grad[b, ch, i, j]
        return gx

    @njit(cache=True)
    def _border_reach_nb(bg):
        h, w = bg.shape
        reach = np.zeros((h, w), dtype=np.bool_)
        stack = np.empty(h * w, dtype=np.int64)
        top = 0
        for i in range(h):
            for j in range(w):
                if (i == 0 or j == 0 or i == h - 1 or j == w - 1) and bg[i, j] and not reach[i, j]:
                    reach[i, j] = True
                    stack[top] = i * w + j
                    top += 1
        while top > 0:
            top -= 1
            p = stack[top]
            i, j = p // w, p % w
            if i > 0 and bg[i - 1, j] and not reach[i - 1, j]:
                reach[i - 1, j] = True
                stack[top] = p - w
                top += 1
            if i < h - 1 and bg[i + 1, j] and not reach[i + 1, j]:
                reach[i + 1, j] = True
                stack[top] = p + w
                top += 1
            if j > 0 and bg[i, j - 1] and not reach[i, j - 1]:
                reach[i, j - 1] = True
                stack[top] = p - 1
                top += 1
            if j < w - 1 and bg[i, j + 1] and not reach[i, j + 1]:
                reach[i, j + 1] = True
                stack[top] = p + 1
                top += 1
        return reach

    def im2col_numba(xp, k, stride):
        oh = (xp.shape[2] - k) // stride + 1
        ow = (xp.shape[3] - k) // stride + 1
        return _im2col_nb(np.ascontiguousarray(xp), k, stride, oh, ow)

    def col2im_numba(cols, c, hp, wp, k, stride):
        oh = (hp - k) // stride + 1
        ow = (wp - k) // stride + 1
        return _col2im_nb(np.ascontiguousarray(cols), c, hp, wp, k, stride, oh, ow)

    def maxpool2_numba(x):
        return _maxpool2_nb(np.ascontiguousarray(x))

    def maxpool2_backward_numba(grad, idx):
        return _maxpool2_backward_nb(np.ascontiguousarray(grad), np.ascontiguousarray(idx))

    def border_reach_numba(background):
        return _border_reach_nb(np.ascontiguousarray(background, dtype=np.bool_))

    # the strided numpy copy is a single memory-bound pass and measured faster
    # than the jitted loop, so both backends share it
    im2col = im2col_numpy
    col2im = col2im_numba
    maxpool2 = maxpool2_numba
    maxpool2_backward = maxpool2_backward_numba
    border_reach = border_reach_numba
else:
    im2col = im2col_numpy
    col2im = col2im_numpy
    maxpool2 = maxpool2_numpy
    maxpool2_backward = maxpool2_backward_numpy
    border_reach = border_reach_numpy

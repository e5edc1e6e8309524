"""The numba and numpy kernel paths must agree exactly."""

import numpy as np
import pytest

from splice_mfcn import _kernels as K

pytestmark = pytest.mark.skipif(not K.HAS_NUMBA, reason="numba backend disabled")


@pytest.mark.parametrize("k,stride", [(3, 1), (3, 2), (4, 2), (16, 8)])
def test_im2col_col2im_agree(rng, k, stride):
    xp = rng.standard_normal((2, 3, 2 * k + 3, 2 * k + 1))
    a = K.im2col_numpy(xp, k, stride)
    b = K.im2col_numba(xp, k, stride)
    np.testing.assert_array_equal(a, b)
    cols = rng.standard_normal(a.shape)
    np.testing.assert_array_equal(
        K.col2im_numpy(cols, 3, *xp.shape[2:], k, stride),
        K.col2im_numba(cols, 3, *xp.shape[2:], k, stride),
    )


def test_maxpool_agree(rng):
    x = rng.integers(0, 4, (2, 3, 6, 8)).astype(float)  # many ties
    o1, i1 = K.maxpool2_numpy(x)
    o2, i2 = K.maxpool2_numba(x)
    np.testing.assert_array_equal(o1, o2)
    np.testing.assert_array_equal(i1, i2)
    g = rng.standard_normal(o1.shape)
    np.testing.assert_array_equal(K.maxpool2_backward_numpy(g, i1), K.maxpool2_backward_numba(g, i2))


def test_border_reach_agree(rng):
    for _ in range(200):
        bg = rng.random((12, 9)) < 0.55
        np.testing.assert_array_equal(K.border_reach_numpy(bg), K.border_reach_numba(bg))


def test_backend_flag():
    assert K.BACKEND in ("numba", "numpy")

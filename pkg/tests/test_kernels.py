"""The numba kernels and their numpy fallbacks must agree."""

import numpy as np
import pytest

from sleepegan.autodiff import Tensor, kernels
from sleepegan.autodiff import functional as F

pytestmark = pytest.mark.skipif(not kernels.NUMBA_AVAILABLE, reason="numba missing")


@pytest.fixture
def rng():
    return np.random.default_rng(123)


@pytest.mark.parametrize("stride", [1, 2, 5])
def test_conv_backends_agree(rng, stride):
    x = rng.normal(size=(3, 4, 40))
    w = rng.normal(size=(6, 4, 7))
    ya = kernels.np_conv1d_forward(x, w, stride)
    yb = kernels.nb_conv1d_forward(x, w, stride)
    np.testing.assert_allclose(ya, yb, atol=1e-12)
    gy = rng.normal(size=ya.shape)
    for a, b in zip(kernels.np_conv1d_backward(x, w, gy, stride), kernels.nb_conv1d_backward(x, w, gy, stride)):
        np.testing.assert_allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("window,stride", [(2, 2), (3, 1), (4, 3)])
def test_pool_backends_agree(rng, window, stride):
    x = rng.normal(size=(2, 3, 31))
    ya, ia = kernels.np_maxpool_forward(x, window, stride)
    yb, ib = kernels.nb_maxpool_forward(x, window, stride)
    assert np.array_equal(ya, yb) and np.array_equal(ia, ib)
    gy = rng.normal(size=ya.shape)
    np.testing.assert_allclose(
        kernels.np_maxpool_backward(gy, ia, 31), kernels.nb_maxpool_backward(gy, ib, 31), atol=1e-14
    )


def test_lstm_backends_agree(rng):
    xw = rng.normal(size=(3, 9, 20))
    h0, c0 = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    u = rng.normal(size=(5, 20)) * 0.3
    fa = kernels.np_lstm_forward(xw, h0, c0, u)
    fb = kernels.nb_lstm_forward(xw, h0, c0, u)
    for a, b in zip(fa, fb):
        np.testing.assert_allclose(a, b, atol=1e-13)
    ghs, ghT, gcT = rng.normal(size=(3, 9, 5)), rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    ba = kernels.np_lstm_backward(ghs, ghT, gcT, h0, c0, u, *fa)
    bb = kernels.nb_lstm_backward(ghs, ghT, gcT, h0, c0, u, *fb)
    for a, b in zip(ba, bb):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_use_backend_switches_functional_path(rng):
    x = Tensor(rng.normal(size=(2, 2, 30)))
    w = Tensor(rng.normal(size=(3, 2, 4)))
    prev = kernels.active().name
    try:
        kernels.use_backend("numpy")
        a = F.conv1d(x, w, stride=3).data
        kernels.use_backend("numba")
        b = F.conv1d(x, w, stride=3).data
    finally:
        kernels.use_backend(prev)
    np.testing.assert_allclose(a, b, atol=1e-12)
    with pytest.raises(ValueError):
        kernels.use_backend("cuda")

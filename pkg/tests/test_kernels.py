import numpy as np
import pytest

from ganem import _kernels as kern


def _pair(name):
    return getattr(kern.numba_impl, name), getattr(kern.numpy_impl, name)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_leaky_relu_paths_agree(rng):
    x = rng.normal(size=(7, 5))
    g = rng.normal(size=(7, 5))
    a, b = _pair("leaky_relu")
    np.testing.assert_array_equal(a(x, 0.2), b(x, 0.2))
    a, b = _pair("leaky_relu_grad")
    np.testing.assert_array_equal(a(x, g, 0.2), b(x, g, 0.2))


def test_rmsprop_paths_agree(rng):
    p0, g = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    acc0 = rng.uniform(size=(4, 6))
    out = []
    for impl in (kern.numba_impl, kern.numpy_impl):
        p, acc = p0.copy(), acc0.copy()
        impl.rmsprop_update(p, g, acc, 1e-3, 0.98, 1e-8)
        out.append((p, acc))
    np.testing.assert_allclose(out[0][0], out[1][0], rtol=1e-14)
    np.testing.assert_allclose(out[0][1], out[1][1], rtol=1e-14)


def test_clip_paths_agree(rng):
    p = rng.normal(size=(3, 9))
    q = p.copy()
    kern.numba_impl.clip_inplace(p, 0.3)
    kern.numpy_impl.clip_inplace(q, 0.3)
    np.testing.assert_array_equal(p, q)


def test_distance_kernels_agree(rng):
    X, C = rng.normal(size=(30, 4)), rng.normal(size=(5, 4))
    a, b = _pair("sq_dists")
    np.testing.assert_allclose(a(X, C), b(X, C), rtol=1e-13)
    a, b = _pair("assign_nearest")
    (la, da), (lb, db) = a(X, C), b(X, C)
    np.testing.assert_array_equal(la, lb)
    np.testing.assert_allclose(da, db, rtol=1e-13)


def test_gaussian_logpdf_agrees(rng):
    X, m = rng.normal(size=(20, 3)), rng.normal(size=(4, 3))
    v = rng.uniform(0.1, 2.0, size=(4, 3))
    a, b = _pair("diag_gauss_logpdf")
    np.testing.assert_allclose(a(X, m, v), b(X, m, v), rtol=1e-13)


def test_confusion_and_pooling_agree(rng):
    pred, truth = rng.integers(4, size=50), rng.integers(4, size=50)
    a, b = _pair("confusion")
    np.testing.assert_array_equal(a(pred, truth, 4), b(pred, truth, 4))
    imgs = rng.uniform(size=(3, 6, 8))
    a, b = _pair("mean_pool2")
    np.testing.assert_allclose(a(imgs), b(imgs), rtol=1e-15)


def test_env_flag_selects_numpy(monkeypatch):
    monkeypatch.setenv("GANEM_NUMBA", "0")
    assert not kern.numba_enabled()
    assert kern.active() is kern.numpy_impl

"""The compiled kernels and the numpy fallback must agree."""
import numpy as np
import pytest

from shortcutlab import _pykernels, kernels

ck = pytest.importorskip("shortcutlab._ckernels")


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")


@pytest.mark.parametrize("seed", range(5))
def test_rasterize_identical(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 20))
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    r = rng.uniform(4, 14, n)
    xs, ys = 16 + r * np.cos(ang), 16 + r * np.sin(ang)
    a = ck.rasterize_polygon(xs, ys, 32, 32)
    b = _pykernels.rasterize_polygon(xs, ys, 32, 32)
    assert a.dtype == b.dtype == np.uint8
    np.testing.assert_array_equal(a, b)


def test_rasterize_square():
    xs = np.array([8.0, 24.0, 24.0, 8.0])
    ys = np.array([8.0, 8.0, 24.0, 24.0])
    m = ck.rasterize_polygon(xs, ys, 32, 32)
    assert m.sum() == 16 * 16
    assert m[8:24, 8:24].all()


def test_softmax_xent_agree():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(17, 9)) * 5
    y = rng.integers(0, 9, size=17).astype(np.int64)
    la, pa = ck.softmax_xent(z, y)
    lb, pb = _pykernels.softmax_xent(z, y)
    np.testing.assert_allclose(la, lb, rtol=1e-13, atol=1e-14)
    np.testing.assert_allclose(pa, pb, rtol=1e-13, atol=1e-16)
    ua, qa = ck.softmax_xent_uniform(z)
    ub, qb = _pykernels.softmax_xent_uniform(z)
    np.testing.assert_allclose(ua, ub, rtol=1e-13)
    np.testing.assert_allclose(qa, qb, rtol=1e-13, atol=1e-16)


def test_adam_update_bitwise():
    rng = np.random.default_rng(1)
    p, g = rng.normal(size=50), rng.normal(size=50)
    m1, v1 = rng.normal(size=50), rng.uniform(size=50)
    m2, v2 = m1.copy(), v1.copy()
    args = (0.01, 0.9, 0.999, 1e-8, 5e-5, 1 - 0.9 ** 3, 1 - 0.999 ** 3)
    a = ck.adam_update(p, g, m1, v1, *args)
    b = _pykernels.adam_update(p, g, m2, v2, *args)
    assert a.tobytes() == b.tobytes()
    assert m1.tobytes() == m2.tobytes() and v1.tobytes() == v2.tobytes()

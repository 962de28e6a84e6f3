import numpy as np
import pytest
import scipy.sparse as sp

from flow4dvar.control import RieszMap
from flow4dvar.verify import random_direction, taylor_test


def _cubic(x):
    return float(np.sum(x ** 3) + x @ x), 3 * x ** 2 + 2 * x


def test_orders_for_a_smooth_function():
    x = np.linspace(-1, 1, 7)
    dm = np.random.default_rng(0).standard_normal(7)
    res = taylor_test(_cubic, x, dm, h0=1e-1, levels=5)
    assert all(abs(o - 1.0) < 0.1 for o in res.orders0)
    assert all(abs(o - 2.0) < 0.1 for o in res.orders1)
    assert "order1" in res.report("cubic")


def test_quadratic_has_exact_second_order_remainder():
    A = np.diag([1.0, 2.0, 3.0])
    res = taylor_test(lambda x: (0.5 * x @ A @ x, A @ x), np.ones(3), np.array([1.0, -1.0, 0.5]), levels=4)
    assert np.allclose(res.orders1, 2.0, atol=1e-10)
    assert res.r1[0] == pytest.approx(0.5 * (1 * 1 + 2 * 1 + 3 * 0.25), rel=1e-12)


def test_negated_gradient_is_caught():
    x = np.linspace(-1, 1, 7)
    dm = np.random.default_rng(1).standard_normal(7)
    res = taylor_test(_cubic, x, dm, h0=1e-2, levels=4, negate=True)
    assert res.min_order < 1.2


def test_roundoff_is_flagged():
    res = taylor_test(lambda x: (float(x @ x) + 1e6, 2 * x), np.ones(2), np.ones(2), h0=1e-12, levels=3)
    assert all(o is None for o in res.orders1)
    assert "roundoff" in res.report()


def test_input_validation():
    with pytest.raises(ValueError):
        taylor_test(_cubic, np.ones(2), np.zeros(2))
    with pytest.raises(ValueError):
        taylor_test(_cubic, np.ones(2), np.ones(2), levels=2)


def test_random_direction_normalisation():
    H = sp.csr_matrix(np.diag(np.arange(1.0, 11.0)))
    R = RieszMap(H)
    d = random_direction(10, seed=3, riesz=R)
    assert d @ (H @ d) == pytest.approx(1.0, rel=1e-12)
    b = random_direction(10, seed=3, riesz=R, block=slice(0, 4))
    assert not np.any(b[4:]) and np.any(b[:4])
    assert np.array_equal(random_direction(10, 5), random_direction(10, 5))
    assert np.linalg.norm(random_direction(10, 5)) == pytest.approx(1.0)

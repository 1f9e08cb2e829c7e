import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dyra import autodiff as ad
from dyra.core import DomainError


def _g(f, *point):
    return ad.grad(lambda xs: f(*xs), point)


def test_product_rule():
    v, g = _g(lambda x, y: x * y + x, 3.0, 4.0)
    assert v == 15.0
    np.testing.assert_array_equal(g, [5.0, 3.0])


def test_quotient_and_reflected_ops():
    _, g = _g(lambda x, y: (1.0 - x) / y + 2.0 * y - 7.0 / x, 2.0, 4.0)
    np.testing.assert_allclose(g, [-1 / 4 + 7 / 4, 1 / 16 + 2.0])


def test_unary_derivatives():
    x0 = 0.7
    cases = [
        (ad.exp, math.exp(x0)),
        (ad.log, 1 / x0),
        (ad.tanh, 1 - math.tanh(x0) ** 2),
        (ad.cos, -math.sin(x0)),
        (ad.sigmoid, math.exp(-x0) / (1 + math.exp(-x0)) ** 2),
        (lambda x: x ** 3, 3 * x0 ** 2),
        (lambda x: -x, -1.0),
        (abs, 1.0),
    ]
    for f, want in cases:
        _, g = _g(f, x0)
        assert g[0] == pytest.approx(want, rel=1e-14)


def test_max_min_const_route():
    _, g = _g(lambda x: ad.maximum(x, 1.0) + ad.minimum(x, 1.0) * 3.0, 2.0)
    assert g[0] == 1.0
    _, g = _g(lambda x: ad.clip(x, 0.0, 1.0), 5.0)
    assert g[0] == 0.0


def test_abs_subgradient_at_zero():
    _, g = _g(abs, 0.0)
    assert g[0] == 1.0


def test_fan_out_accumulates():
    # x used three times
    _, g = _g(lambda x: x * x * x, 2.0)
    assert g[0] == 12.0


def test_sum_mean_dot():
    _, g = ad.grad(lambda xs: ad.sum_(xs) + ad.mean(xs) * 4.0 + ad.dot(xs, [1.0, 2.0]), [1.0, 1.0])
    np.testing.assert_array_equal(g, [1 + 2 + 1, 1 + 2 + 2])


def test_constant_output_has_zero_grad():
    v, g = ad.grad(lambda xs: 3.0, [1.0, 2.0])
    assert v == 3.0
    np.testing.assert_array_equal(g, [0.0, 0.0])


def test_log_domain_error_names_node():
    tape = ad.Tape()
    x = tape.var(-1.0)
    with pytest.raises(ad.TapeDomainError) as info:
        ad.log(x)
    assert info.value.node_index == 1
    with pytest.raises(DomainError):
        ad.log(0.0)


def test_division_by_zero():
    tape = ad.Tape()
    with pytest.raises(ad.TapeDomainError):
        tape.var(1.0) / 0.0


def test_mixed_tapes_rejected():
    a, b = ad.Tape().var(1.0), ad.Tape().var(2.0)
    with pytest.raises(ValueError):
        a + b


def test_helpers_work_on_floats():
    assert ad.sigmoid(0.0) == 0.5
    assert ad.sum_([0.1] * 10) == 1.0
    assert ad.matvec([[1.0, 2.0], [3.0, 4.0]], [1.0, 1.0]) == [3.0, 7.0]


def test_sigmoid_tail_stable():
    assert ad.sigmoid(-800.0) == 0.0
    _, g = _g(ad.sigmoid, -800.0)
    assert g[0] == 0.0


def _rosen(v):
    x, y = v
    return (1.0 - x) ** 2 + 100.0 * (y - x * x) ** 2


def test_gradcheck_tape_rosenbrock():
    rep = ad.gradcheck(_rosen, [-1.2, 1.0])
    assert rep.ok
    # analytic oracle
    x, y = -1.2, 1.0
    np.testing.assert_allclose(rep.analytic, [-2 * (1 - x) - 400 * x * (y - x * x), 200 * (y - x * x)])


def test_gradcheck_detects_wrong_gradient():
    rep = ad.gradcheck(lambda v: float(v[0] ** 3), [1.5], grad_fn=lambda v: [2 * v[0] ** 2])
    assert not rep.ok
    assert list(rep.failed) == [0]
    assert "FAIL" in rep.table()


def test_relative_error_floor():
    assert ad.relative_error(0.0, 0.0) == 0.0
    assert ad.relative_error(1.0, -1.0) == 1.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-2.0, 2.0), min_size=3, max_size=3))
def test_tape_matches_central_difference(p):
    def f(v):
        a, b, c = v
        return ad.tanh(a * b) + ad.exp(0.3 * c) * ad.sigmoid(a - c) + ad.cos(b) / (2.0 + a * a)

    assert ad.gradcheck(f, p, tol=1e-6).ok

"""Tests for the Taylor-jet Lie derivative engine."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from obsaware import liealg, model
from obsaware.liealg import (
    NumericsError,
    Series,
    SmoothSystem,
    concat,
    gradient_check,
    integrator_chain,
    lie_table,
    taylor_flow,
)


def matvec(m, x):
    """Constant matrix times a state vector, Series- and ndarray-compatible."""
    rows = []
    for i in range(m.shape[0]):
        acc = m[i, 0] * x[0:1]
        for j in range(1, m.shape[1]):
            acc = acc + m[i, j] * x[j : j + 1]
        rows.append(acc)
    return concat(rows)


def linear_system(a, c):
    return SmoothSystem(
        a.shape[0],
        1,
        c.shape[0],
        lambda x, u: matvec(a, x),
        lambda x: matvec(c, x),
    )


# ---------------------------------------------------------------------------
# taylor_flow
# ---------------------------------------------------------------------------


def test_taylor_flow_exponential_series():
    sys = SmoothSystem(1, 1, 1, lambda x, u: x * 1.0, lambda x: x * 1.0)
    coeffs = taylor_flow(sys, np.array([1.0]), np.array([0.0]), 4)
    np.testing.assert_allclose(coeffs.ravel(), [1.0, 1.0, 0.5, 1.0 / 6.0, 1.0 / 24.0], rtol=1e-15)


def test_taylor_flow_constant_flow():
    sys = SmoothSystem(3, 1, 1, lambda x, u: x * 0.0, lambda x: x[0:1] * 1.0)
    x0 = np.array([4.0, -1.0, 2.5])
    coeffs = taylor_flow(sys, x0, np.array([0.0]), 5)
    np.testing.assert_array_equal(coeffs[0], x0)
    assert np.all(coeffs[1:] == 0.0)


def test_taylor_flow_matches_rk4_oracle():
    # RK4 over a 1e-3 s step has local error ~dt^5; an order-4 Taylor sum must
    # agree to much better than 1e-9 relative.
    rng = np.random.default_rng(7)
    sys = model.cls_system()
    for _ in range(5):
        x = model.random_state(rng).vec
        u = model.random_input(rng).vec
        coeffs = taylor_flow(sys, x, u, 4)
        t = 1e-3
        taylor_sum = sum(coeffs[j] * t**j for j in range(5))
        reference = x[:, None] + 0.0
        reference = liealg.rk4_step(sys.dynamics, x[:, None], u[:, None], t)[:, 0]
        rel = np.max(np.abs(taylor_sum - reference)) / np.max(np.abs(reference))
        assert rel < 1e-9


def test_taylor_flow_nonfinite_reports_order():
    sys = SmoothSystem(1, 1, 1, lambda x, u: x * x, lambda x: x * 1.0)
    with pytest.raises(NumericsError, match="order"):
        taylor_flow(sys, np.array([1e200]), np.array([0.0]), 3)


# ---------------------------------------------------------------------------
# lie_table
# ---------------------------------------------------------------------------


def test_lie_table_order_zero_is_observation():
    rng = np.random.default_rng(1)
    sys = model.cls_system()
    x = model.random_state(rng)
    u = model.random_input(rng)
    table = lie_table(sys, x.vec, u.vec, 0)
    np.testing.assert_allclose(table.coefficients[0], model.observe_vec(x.vec), rtol=1e-15)
    np.testing.assert_allclose(table.gradients[0], model.observation_jacobian(x), atol=1e-15)


def test_lie_table_double_integrator_chain():
    sys = integrator_chain(2)
    x = np.array([2.0, 3.0])
    table = lie_table(sys, x, np.array([0.0]), 3)
    np.testing.assert_array_equal(table.coefficients.ravel(), [2.0, 3.0, 0.0, 0.0])
    expected_grads = np.array([[[1.0, 0.0]], [[0.0, 1.0]], [[0.0, 0.0]], [[0.0, 0.0]]])
    np.testing.assert_array_equal(table.gradients, expected_grads)


def test_lie_table_cls_first_range_row():
    # The gradient of the first Lie derivative of the half squared range is
    # [v, 0, r]: the transport term r x w_f drops out of r . rdot.
    rng = np.random.default_rng(3)
    sys = model.cls_system()
    for _ in range(4):
        x = model.random_state(rng)
        u = model.random_input(rng)
        table = lie_table(sys, x.vec, u.vec, 1)
        expected = np.concatenate([x.v, np.zeros(4), x.r])
        np.testing.assert_allclose(table.gradients[1][0], expected, atol=1e-12)


def test_lie_table_linear_system_matches_matrix_powers():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(4, 4))
    c = rng.normal(size=(2, 4))
    x = rng.normal(size=4)
    sys = linear_system(a, c)
    table = lie_table(sys, x, np.array([0.0]), 4)
    for j in range(5):
        caj = c @ np.linalg.matrix_power(a, j)
        np.testing.assert_allclose(table.coefficients[j], caj @ x, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(table.gradients[j], caj, rtol=1e-12, atol=1e-12)


def test_lie_table_prefix_stability():
    rng = np.random.default_rng(11)
    sys = model.cls_system()
    x = model.random_state(rng).vec
    u = model.random_input(rng).vec
    full = lie_table(sys, x, u, 4)
    short = lie_table(sys, x, u, 3)
    np.testing.assert_array_equal(full.truncated(3).coefficients, short.coefficients)
    np.testing.assert_array_equal(full.truncated(3).gradients, short.gradients)


# ---------------------------------------------------------------------------
# gradient_check
# ---------------------------------------------------------------------------


def test_gradient_check_linear_chain_exact():
    sys = integrator_chain(2)
    dev = gradient_check(sys, np.array([0.3, -1.2]), np.array([0.0]), 3, 1e-4)
    assert dev < 1e-11


def test_gradient_check_cls():
    rng = np.random.default_rng(9)
    sys = model.cls_system()
    x = model.random_state(rng).vec
    u = model.random_input(rng).vec
    assert gradient_check(sys, x, u, 3, 1e-6) < 1e-5


def test_gradient_check_quadratic_scalar():
    sys = SmoothSystem(1, 1, 1, lambda x, u: x * x, lambda x: x * 1.0)
    assert gradient_check(sys, np.array([0.8]), np.array([0.0]), 4, 1e-6) < 1e-5


def test_gradient_check_deviation_shrinks_with_step():
    sys = SmoothSystem(1, 1, 1, lambda x, u: x * x * x, lambda x: x * x)
    devs = [gradient_check(sys, np.array([0.9]), np.array([0.0]), 3, s) for s in (1e-2, 1e-3, 1e-4)]
    assert devs[0] > devs[1] > devs[2]


# ---------------------------------------------------------------------------
# Series arithmetic
# ---------------------------------------------------------------------------


coeff_arrays = st.integers(1, 4).flatmap(
    lambda n: st.lists(
        st.lists(st.floats(-10, 10), min_size=3, max_size=3),
        min_size=n,
        max_size=n,
    )
)


def _mk(coeffs):
    c = np.asarray(coeffs, dtype=float)[:, None, :, None]  # (R, 1, 3, 1)
    return Series(c.copy())


@settings(max_examples=100, deadline=None)
@given(coeff_arrays, coeff_arrays, coeff_arrays)
def test_series_mul_distributes(a, b, c):
    if not (len(a) == len(b) == len(c)):
        return
    sa, sb, sc = _mk(a), _mk(b), _mk(c)
    lhs = (sa + sb) * sc
    rhs = sa * sc + sb * sc
    np.testing.assert_allclose(lhs.c, rhs.c, rtol=1e-12, atol=1e-12)


def test_series_mul_matches_polynomial_product():
    rng = np.random.default_rng(2)
    pa = rng.normal(size=4)
    pb = rng.normal(size=4)
    sa = Series(pa[:, None, None, None].copy())
    sb = Series(pb[:, None, None, None].copy())
    prod = (sa * sb).c[:, 0, 0, 0]
    expected = np.convolve(pa, pb)[:4]
    np.testing.assert_allclose(prod, expected, rtol=1e-14)


def test_series_tangent_product_rule():
    # d(fg) = f dg + g df on the tangent slots
    rng = np.random.default_rng(4)
    ca = rng.normal(size=(3, 3, 2, 1))
    cb = rng.normal(size=(3, 3, 2, 1))
    out = (Series(ca.copy()) * Series(cb.copy())).c
    for k in range(3):
        val = sum(ca[i, 0] * cb[k - i, 0] for i in range(k + 1))
        np.testing.assert_allclose(out[k, 0], val, rtol=1e-13)
        for d in (1, 2):
            tan = sum(ca[i, 0] * cb[k - i, d] + ca[i, d] * cb[k - i, 0] for i in range(k + 1))
            np.testing.assert_allclose(out[k, d], tan, rtol=1e-12, atol=1e-13)


def test_series_transcendental_recurrences():
    # flow of xdot = sin(x) from x0: compare low-order coefficients with the
    # hand-derived chain-rule values sin(x0), sin(x0)cos(x0)/2
    def dyn(x, u):
        return liealg.sin(x) if isinstance(x, Series) else np.sin(x)

    sys = SmoothSystem(1, 1, 1, dyn, lambda x: x * 1.0)
    x0 = 0.7
    coeffs = taylor_flow(sys, np.array([x0]), np.array([0.0]), 2).ravel()
    np.testing.assert_allclose(coeffs, [x0, np.sin(x0), np.sin(x0) * np.cos(x0) / 2.0], rtol=1e-14)


def test_series_exp_matches_flow():
    def dyn(x, u):
        return liealg.exp(x) if isinstance(x, Series) else np.exp(x)

    sys = SmoothSystem(1, 1, 1, dyn, lambda x: x * 1.0)
    x0 = -0.3
    coeffs = taylor_flow(sys, np.array([x0]), np.array([0.0]), 2).ravel()
    np.testing.assert_allclose(coeffs, [x0, np.exp(x0), np.exp(2 * x0) / 2.0], rtol=1e-14)


def test_batched_matches_single():
    rng = np.random.default_rng(6)
    sys = model.cls_system()
    xs = [model.random_state(rng).vec for _ in range(5)]
    us = [model.random_input(rng).vec for _ in range(5)]
    xb = np.stack(xs, axis=1)
    ub = np.stack(us, axis=1)
    coeffs, grads = liealg.lie_gradients(sys, xb, ub, 4)
    for i in range(5):
        table = lie_table(sys, xs[i], us[i], 4)
        np.testing.assert_allclose(coeffs[..., i], table.coefficients, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(grads[..., i], table.gradients, rtol=1e-12, atol=1e-12)

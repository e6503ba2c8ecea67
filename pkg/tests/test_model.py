"""Tests for the quadrotor relative-motion model."""

import numpy as np
import pytest

from obsaware import model
from obsaware.model import (
    ControlInput,
    RelativeState,
    cross_mat,
    dynamics,
    jminus,
    jplus,
    observe,
    observe_vec,
    observation_jacobian,
    pure_imag,
    quat_mul,
    rot_mat,
    step_rk4,
)

IDENTITY_Q = np.array([0.0, 0.0, 0.0, 1.0])


def rodrigues(axis, angle):
    """Independent axis-angle rotation matrix oracle."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    k = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([np.sin(angle / 2.0) * axis, [np.cos(angle / 2.0)]])


def random_unit_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


# ---------------------------------------------------------------------------
# quaternion algebra
# ---------------------------------------------------------------------------


def test_rot_mat_identity():
    np.testing.assert_array_almost_equal(rot_mat(IDENTITY_Q), np.eye(3), decimal=15)


def test_cross_mat_annihilates_argument():
    rng = np.random.default_rng(0)
    for _ in range(5):
        a = rng.normal(size=3)
        np.testing.assert_allclose(cross_mat(a) @ a, np.zeros(3), atol=1e-15)
        b = rng.normal(size=3)
        np.testing.assert_allclose(cross_mat(a) @ b, np.cross(a, b), atol=1e-15)


def test_rot_mat_quarter_turn_about_z():
    q = np.array([0.0, 0.0, np.sqrt(2) / 2, np.sqrt(2) / 2])
    np.testing.assert_allclose(rot_mat(q) @ np.array([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)


def test_rot_mat_matches_rodrigues_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        axis = rng.normal(size=3)
        angle = rng.uniform(-np.pi, np.pi)
        q = quat_from_axis_angle(axis, angle)
        np.testing.assert_allclose(rot_mat(q), rodrigues(axis, angle), atol=1e-12)


def test_rot_mat_is_special_orthogonal():
    rng = np.random.default_rng(2)
    for _ in range(10):
        r = rot_mat(random_unit_quat(rng))
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)


def test_rot_mat_rejects_non_unit():
    with pytest.raises(ValueError):
        rot_mat(np.array([0.0, 0.0, 0.0, 1.1]))


def test_quat_mul_block_form_oracle():
    # Hamiltonian block form: [q4*1 + [qv]x, qv; -qv^T, q4] applied to (pv, p4)
    rng = np.random.default_rng(3)
    for _ in range(10):
        q, p = random_unit_quat(rng), random_unit_quat(rng)
        block = np.zeros((4, 4))
        block[0:3, 0:3] = q[3] * np.eye(3) + cross_mat(q[0:3])
        block[0:3, 3] = q[0:3]
        block[3, 0:3] = -q[0:3]
        block[3, 3] = q[3]
        np.testing.assert_allclose(quat_mul(q, p), block @ p, atol=1e-14)


def test_rotation_homomorphism():
    rng = np.random.default_rng(4)
    for _ in range(20):
        q, p = random_unit_quat(rng), random_unit_quat(rng)
        np.testing.assert_allclose(rot_mat(quat_mul(q, p)), rot_mat(q) @ rot_mat(p), atol=1e-12)


def test_jplus_jminus_match_quaternion_products():
    # J+(q) w = q (x) (w, 0) and J-(q) w = (w, 0) (x) q; the affine-form
    # quaternion rate J+ wl - J- wf is exactly twice the half-product rate.
    rng = np.random.default_rng(5)
    for _ in range(10):
        q = random_unit_quat(rng)
        w = rng.normal(size=3)
        np.testing.assert_allclose(jplus(q) @ w, quat_mul(q, pure_imag(w)), atol=1e-14)
        np.testing.assert_allclose(jminus(q) @ w, quat_mul(pure_imag(w), q), atol=1e-14)


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------


def test_dynamics_hover_equilibrium():
    x = RelativeState(r=[3.0, 0.0, 0.0])
    u = model.hover_input(9.81)
    np.testing.assert_allclose(dynamics(x, u), np.zeros(10), atol=1e-14)


def test_dynamics_drift_field():
    # zero input (formal evaluation): rdot = v, qdot = 0, vdot = 0
    x = RelativeState(r=[1.0, 2.0, 3.0], v=[0.4, -0.2, 0.1])
    xdot = dynamics(x.vec, np.zeros(8))
    np.testing.assert_allclose(xdot[0:3], x.v, atol=1e-15)
    np.testing.assert_allclose(xdot[3:10], np.zeros(7), atol=1e-15)


def _affine_oracle(x, u):
    """Independent transcription: stacked vector fields evaluated term by term."""
    r, q, v = x[0:3], x[3:7], x[7:10]
    qv, q4 = q[0:3], q[3]

    def skew(a):
        return np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0.0]])

    jp = np.vstack([q4 * np.eye(3) + skew(qv), -qv])
    jm = np.vstack([q4 * np.eye(3) - skew(qv), -qv])
    rq = np.eye(3) + 2 * q4 * skew(qv) + 2 * skew(qv) @ skew(qv)
    e3 = np.array([0.0, 0.0, 1.0])

    f0 = np.concatenate([v, np.zeros(7)])
    f1 = np.concatenate([np.zeros(3), np.zeros(4), rq @ e3])
    f3 = np.concatenate([np.zeros(7), -e3])
    out = f0 + f1 * u[0] + f3 * u[4]
    out[3:7] += jp @ u[1:4]
    out[0:3] += skew(r) @ u[5:8]
    out[3:7] -= jm @ u[5:8]
    out[7:10] += skew(v) @ u[5:8]
    return out


def test_dynamics_matches_duplicate_transcription():
    rng = np.random.default_rng(6)
    for _ in range(10):
        x = model.random_state(rng).vec
        u = model.random_input(rng).vec
        np.testing.assert_allclose(dynamics(x, u), _affine_oracle(x, u), atol=1e-12)


def test_dynamics_affine_in_input():
    rng = np.random.default_rng(7)
    x = model.random_state(rng).vec
    u1 = rng.normal(size=8)
    u2 = rng.normal(size=8)
    residual = dynamics(x, u1 + u2) - dynamics(x, u1) - dynamics(x, u2) + dynamics(x, np.zeros(8))
    np.testing.assert_allclose(residual, np.zeros(10), atol=1e-12)


# ---------------------------------------------------------------------------
# step_rk4
# ---------------------------------------------------------------------------


def test_step_rk4_hover_fixed_point():
    x = RelativeState(r=[2.0, 1.0, 0.5])
    out = step_rk4(x, model.hover_input(), 0.1)
    np.testing.assert_allclose(out.vec, x.vec, atol=1e-14)


def test_step_rk4_pure_drift_exact():
    x = RelativeState(r=[1.0, 0.0, 0.0], v=[0.3, 0.2, -0.1])
    dt = 0.25
    out = step_rk4(x.vec, np.zeros(8), dt)
    np.testing.assert_allclose(out[0:3], x.r + dt * x.v, rtol=1e-15)
    np.testing.assert_allclose(out[3:10], x.vec[3:10], rtol=1e-15)


def test_step_rk4_richardson_ratio():
    # Fixed total interval resolved with steps h and h/2: the difference
    # scales with the RK4 global error, so halving h shrinks it ~16x.  At
    # dt = 1e-3 the defect is already below the rounding floor, so the order
    # is measured at dt = 0.01 where it is resolvable.
    rng = np.random.default_rng(8)
    x = model.random_state(rng).vec
    u = model.random_input(rng).vec

    def integrate(total, h):
        y = x.copy()
        for _ in range(int(round(total / h))):
            y = step_rk4(y, u, h)
        return y

    assert np.linalg.norm(integrate(1e-3, 1e-3) - integrate(1e-3, 5e-4)) < 1e-12
    d1 = np.linalg.norm(integrate(0.04, 1e-2) - integrate(0.04, 5e-3))
    d2 = np.linalg.norm(integrate(0.04, 5e-3) - integrate(0.04, 2.5e-3))
    assert 13.0 < d1 / d2 < 20.0


def test_step_rk4_quaternion_norm_preserved():
    rng = np.random.default_rng(9)
    x = model.random_state(rng).vec
    u = model.random_input(rng, rate_scale=1.0).vec
    for _ in range(100):
        x = step_rk4(x, u, 0.05)
        assert abs(np.linalg.norm(x[3:7]) - 1.0) < 1e-9


def test_step_rk4_rejects_bad_dt():
    with pytest.raises(ValueError):
        step_rk4(RelativeState(), model.hover_input(), 0.0)


# ---------------------------------------------------------------------------
# observation
# ---------------------------------------------------------------------------


def test_observe_zero_range():
    y = observe(RelativeState())
    assert y.half_range_sq == 0.0


def test_observe_345_triangle():
    y = observe(RelativeState(r=[3.0, 4.0, 0.0]))
    assert y.half_range_sq == pytest.approx(12.5, rel=1e-15)


def test_observation_jacobian_structure_and_fd():
    rng = np.random.default_rng(10)
    x = model.random_state(rng)
    h = observation_jacobian(x)
    expected = np.zeros((5, 10))
    expected[0, 0:3] = x.r
    expected[1:5, 3:7] = np.eye(4)
    np.testing.assert_allclose(h, expected, atol=1e-15)
    # central finite-difference oracle on observe_vec
    eps = 1e-6
    fd = np.zeros((5, 10))
    for i in range(10):
        dx = np.zeros(10)
        dx[i] = eps
        fd[:, i] = (observe_vec(x.vec + dx) - observe_vec(x.vec - dx)) / (2 * eps)
    np.testing.assert_allclose(h, fd, atol=1e-9)


# ---------------------------------------------------------------------------
# domain-type validation
# ---------------------------------------------------------------------------


def test_relative_state_rejects_non_unit_quaternion():
    with pytest.raises(ValueError):
        RelativeState(q=[0.0, 0.0, 0.0, 1.1])


def test_control_input_requires_positive_thrust():
    with pytest.raises(ValueError):
        ControlInput(f_l=0.0)


def test_state_vector_round_trip():
    rng = np.random.default_rng(11)
    x = model.random_state(rng)
    np.testing.assert_array_equal(RelativeState.from_vec(x.vec).vec, x.vec)
    u = model.random_input(rng)
    np.testing.assert_array_equal(ControlInput.from_vec(u.vec).vec, u.vec)

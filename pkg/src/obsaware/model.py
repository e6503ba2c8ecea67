"""Relative motion of a leader-follower quadrotor pair with range sensing.

State (10 components): relative position r [m] of the leader w.r.t. the
follower in the follower frame, the follower-to-leader relative quaternion q
(vector part first, scalar last), and relative velocity v [m/s].  Inputs
(8 components): leader specific thrust and body rates, then the follower's.
The observation is the half squared range plus the relative quaternion.

The dynamics are control-affine; the transport terms r-cross and v-cross ride
on the follower body rate, and the quaternion rate uses the stacked blocks
J+(q) w_l - J-(q) w_f.  All functions accept plain arrays with an optional
trailing batch axis or :class:`~obsaware.liealg.Series` jets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import liealg
from .liealg import SmoothSystem, concat, cross, dot

__all__ = [
    "RelativeState",
    "ControlInput",
    "Observation",
    "quat_mul",
    "rot_mat",
    "cross_mat",
    "pure_imag",
    "jplus",
    "jminus",
    "dynamics",
    "step_rk4",
    "observe",
    "observation_jacobian",
    "cls_system",
    "hover_input",
    "random_state",
    "random_input",
]

QUAT_TOL = 1e-6
_E3 = np.array([0.0, 0.0, 1.0])


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class RelativeState:
    """Relative position / orientation / velocity of the leader w.r.t. the follower."""

    r: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float).reshape(3)
        self.q = np.asarray(self.q, dtype=float).reshape(4)
        self.v = np.asarray(self.v, dtype=float).reshape(3)
        if not (np.all(np.isfinite(self.r)) and np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.v))):
            raise ValueError("state components must be finite")
        if abs(np.linalg.norm(self.q) - 1.0) > 1e-9:
            raise ValueError("quaternion must have unit norm within 1e-9")

    @property
    def vec(self) -> np.ndarray:
        return np.concatenate([self.r, self.q, self.v])

    @staticmethod
    def from_vec(x: np.ndarray) -> "RelativeState":
        x = np.asarray(x, dtype=float).reshape(10)
        return RelativeState(x[0:3], x[3:7], x[7:10])


@dataclass
class ControlInput:
    """Stacked leader and follower inputs: specific thrusts and body rates."""

    f_l: float = 9.81
    w_l: np.ndarray = field(default_factory=lambda: np.zeros(3))
    f_f: float = 9.81
    w_f: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.w_l = np.asarray(self.w_l, dtype=float).reshape(3)
        self.w_f = np.asarray(self.w_f, dtype=float).reshape(3)
        if not (self.f_l > 0 and self.f_f > 0):
            raise ValueError("specific thrusts must be strictly positive")
        if not np.all(np.isfinite(self.vec)):
            raise ValueError("inputs must be finite")

    @property
    def vec(self) -> np.ndarray:
        return np.concatenate([[self.f_l], self.w_l, [self.f_f], self.w_f])

    @staticmethod
    def from_vec(u: np.ndarray) -> "ControlInput":
        u = np.asarray(u, dtype=float).reshape(8)
        return ControlInput(u[0], u[1:4], u[4], u[5:8])


@dataclass
class Observation:
    """Half squared range plus relative quaternion."""

    half_range_sq: float
    q_rel: np.ndarray

    def __post_init__(self):
        self.q_rel = np.asarray(self.q_rel, dtype=float).reshape(4)
        if self.half_range_sq < 0:
            raise ValueError("half squared range cannot be negative")

    @property
    def vec(self) -> np.ndarray:
        return np.concatenate([[self.half_range_sq], self.q_rel])


def _state_vec(x) -> np.ndarray:
    if isinstance(x, RelativeState):
        return x.vec
    return np.asarray(x, dtype=float)


def _input_vec(u) -> np.ndarray:
    if isinstance(u, ControlInput):
        return u.vec
    return np.asarray(u, dtype=float)


# ---------------------------------------------------------------------------
# Quaternion algebra (vector part first, scalar last)
# ---------------------------------------------------------------------------


def quat_mul(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Hamilton product q (x) p."""
    qv, q4 = q[0:3], q[3:4]
    pv, p4 = p[0:3], p[3:4]
    vec = q4 * pv + cross(qv, pv) + p4 * qv
    scal = q4 * p4 - dot(qv, pv)
    return concat([vec, scal])


def pure_imag(a: np.ndarray) -> np.ndarray:
    """Quaternion with vector part a and zero scalar part."""
    a = np.asarray(a, dtype=float)
    zero = np.zeros((1,) + a.shape[1:])
    return np.concatenate([a, zero], axis=0)


def cross_mat(a: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix with cross_mat(a) @ b = a x b."""
    a = np.asarray(a, dtype=float).reshape(3)
    return np.array(
        [
            [0.0, -a[2], a[1]],
            [a[2], 0.0, -a[0]],
            [-a[1], a[0], 0.0],
        ]
    )


def rot_mat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion: 1 + 2 q4 [qv]x + 2 [qv]x^2."""
    q = np.asarray(q, dtype=float).reshape(4)
    if abs(np.linalg.norm(q) - 1.0) > QUAT_TOL:
        raise ValueError("rot_mat requires a unit quaternion (|norm - 1| <= 1e-6)")
    k = cross_mat(q[0:3])
    return np.eye(3) + 2.0 * q[3] * k + 2.0 * (k @ k)


def jplus(q: np.ndarray) -> np.ndarray:
    """4x3 block [q4*1 + [qv]x; -qv^T] mapping leader body rate to quaternion rate."""
    q = np.asarray(q, dtype=float).reshape(4)
    return np.vstack([q[3] * np.eye(3) + cross_mat(q[0:3]), -q[0:3]])


def jminus(q: np.ndarray) -> np.ndarray:
    """4x3 block [q4*1 - [qv]x; -qv^T] mapping follower body rate to quaternion rate."""
    q = np.asarray(q, dtype=float).reshape(4)
    return np.vstack([q[3] * np.eye(3) - cross_mat(q[0:3]), -q[0:3]])


# e3 shaped to broadcast against (3, B) element blocks
_E3C = _E3[:, None]


def _rot_e3(q):
    """R(q) e3 for a quaternion laid out along the leading element axis."""
    qv, q4 = q[0:3], q[3:4]
    w = cross(qv, _E3C)
    return _E3C + 2.0 * (q4 * w) + 2.0 * cross(qv, w)


# ---------------------------------------------------------------------------
# Dynamics, discretization, observation
# ---------------------------------------------------------------------------


def _dynamics_core(x, u):
    r, q, v = x[0:3], x[3:7], x[7:10]
    fl, wl = u[0:1], u[1:4]
    ff, wf = u[4:5], u[5:8]
    r_dot = v + cross(r, wf)
    qv, q4 = q[0:3], q[3:4]
    # J+(q) wl - J-(q) wf, stacked as a 4-vector
    q_vec = q4 * wl + cross(qv, wl) - (q4 * wf - cross(qv, wf))
    q_scal = -dot(qv, wl) + dot(qv, wf)
    v_dot = cross(v, wf) + fl * _rot_e3(q) - ff * _E3C
    return concat([r_dot, q_vec, q_scal, v_dot])


def dynamics(x, u):
    """Time derivative of the relative state under the stacked input.

    Accepts :class:`RelativeState`/:class:`ControlInput`, flat arrays of shape
    ``(10,)``/``(8,)``, batched arrays ``(10, B)``/``(8, B)``, or Series jets.
    """
    uv = _input_vec(u)
    if isinstance(x, liealg.Series):
        return _dynamics_core(x, uv[:, None] if uv.ndim == 1 else uv)
    xv = _state_vec(x)
    if xv.ndim == 1:
        return _dynamics_core(xv[:, None], uv[:, None])[:, 0]
    return _dynamics_core(xv, uv if uv.ndim > 1 else uv[:, None])


def observe_vec(x):
    """Observation as a flat array: (half d^2, q)."""
    if isinstance(x, liealg.Series):
        r, q = x[0:3], x[3:7]
        return concat([dot(r, r) * 0.5, q * 1.0])
    xv = _state_vec(x)
    squeeze = xv.ndim == 1
    if squeeze:
        xv = xv[:, None]
    r, q = xv[0:3], xv[3:7]
    y = np.concatenate([0.5 * (r * r).sum(axis=0, keepdims=True), q], axis=0)
    return y[:, 0] if squeeze else y


def observe(x) -> Observation:
    """Range-plus-attitude observation of a single state."""
    y = observe_vec(x)
    return Observation(float(y[0]), y[1:5])


def observation_jacobian(x) -> np.ndarray:
    """Jacobian of the observation: [[r^T, 0, 0], [0, 1_4, 0]]."""
    xv = _state_vec(x)
    h = np.zeros((5, 10))
    h[0, 0:3] = xv[0:3]
    h[1:5, 3:7] = np.eye(4)
    return h


def _renormalize(xv: np.ndarray) -> np.ndarray:
    norm = np.sqrt((xv[3:7] * xv[3:7]).sum(axis=0, keepdims=True))
    out = xv.copy()
    out[3:7] = xv[3:7] / norm
    return out


def step_rk4(x, u, dt: float):
    """Classical RK4 step of the relative dynamics with quaternion renormalization."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    wrap = isinstance(x, RelativeState)
    xv = _state_vec(x)
    uv = _input_vec(u)
    squeeze = xv.ndim == 1
    if squeeze:
        xv = xv[:, None]
    if uv.ndim == 1:
        uv = uv[:, None]
    out = _renormalize(liealg.rk4_step(_dynamics_core, xv, uv, dt))
    if squeeze:
        out = out[:, 0]
    return RelativeState.from_vec(out) if wrap else out


def cls_system() -> SmoothSystem:
    """The relative-motion system packaged for the Lie-derivative engine."""
    return SmoothSystem(10, 8, 5, _dynamics_core, observe_vec)


# ---------------------------------------------------------------------------
# Convenience constructors
# ---------------------------------------------------------------------------


def hover_input(thrust: float = 9.81) -> ControlInput:
    """Trim input with both vehicles at the same thrust and zero body rates."""
    return ControlInput(thrust, np.zeros(3), thrust, np.zeros(3))


def random_state(rng: np.random.Generator, r_scale: float = 3.0, v_scale: float = 0.5) -> RelativeState:
    """A generic formation state: offset position, random attitude, small velocity."""
    r = rng.normal(size=3)
    r *= (r_scale * (0.5 + rng.random())) / np.linalg.norm(r)
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    v = v_scale * rng.normal(size=3)
    return RelativeState(r, q, v)


def random_input(rng: np.random.Generator, rate_scale: float = 0.5) -> ControlInput:
    """Near-hover input with randomized thrusts and body rates."""
    return ControlInput(
        rng.uniform(8.0, 12.0),
        rng.uniform(-rate_scale, rate_scale, size=3),
        rng.uniform(8.0, 12.0),
        rng.uniform(-rate_scale, rate_scale, size=3),
    )

"""Iterated Lie derivatives of an observation map along a dynamics field.

The engine expands the flow of ``xdot = f(x, u)`` (``u`` held constant) as a
truncated Taylor polynomial in time, composes the observation ``h`` with that
polynomial, and reads the j-th Lie derivative off the j-th Taylor coefficient
of ``h(x(t))``.  State gradients of every coefficient are carried through the
whole recursion as forward-mode tangents, one seed per state direction, so
``D(L_f^j h)`` comes out exact to rounding rather than by finite differences.

All quantities support a trailing batch axis: a state of shape ``(n, B)``
evaluates B points in one pass through the recursion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "NumericsError",
    "Series",
    "SmoothSystem",
    "JetTable",
    "taylor_flow",
    "lie_table",
    "lie_gradients",
    "gradient_check",
    "rk4_step",
    "flow",
    "integrator_chain",
    "concat",
    "dot",
    "cross",
]


class NumericsError(ArithmeticError):
    """Raised when an evaluation leaves the finite floating-point domain."""


# ---------------------------------------------------------------------------
# Truncated Taylor arithmetic with forward tangents
# ---------------------------------------------------------------------------

def _dmul(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """First-order tangent product of two coefficient blocks (dual axis 0)."""
    out = x[:1] * y
    out[1:] += x[1:] * y[:1]
    return out


class Series:
    """Taylor polynomial in t, coefficients carrying forward-mode tangents.

    The coefficient array has shape ``(orders, 1 + n_dirs, *elem)``: axis 0 is
    the Taylor order, axis 1 holds the value (slot 0) and one tangent per seed
    direction, and the remaining axes are the element shape (vector component
    first, optional batch last).  Arithmetic with plain arrays or scalars
    treats them as time-constant, tangent-free factors.
    """

    __slots__ = ("c",)
    __array_ufunc__ = None  # keep numpy from absorbing mixed operations

    def __init__(self, c: np.ndarray):
        self.c = c

    # -- constructors ------------------------------------------------------

    @staticmethod
    def seed(x: np.ndarray, order: int, with_tangents: bool = True) -> "Series":
        """Order-``order`` series for the identity flow started at ``x`` (n, B)."""
        n, b = x.shape
        dirs = n if with_tangents else 0
        c = np.zeros((order + 1, 1 + dirs, n, b))
        c[0, 0] = x
        if with_tangents:
            c[0, 1:] = np.eye(n)[..., None]
        return Series(c)

    # -- ring operations ---------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Series):
            return Series(self.c + other.c)
        out = self.c.copy()
        out[0, 0] = out[0, 0] + np.asarray(other)
        return Series(out)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Series):
            return Series(self.c - other.c)
        out = self.c.copy()
        out[0, 0] = out[0, 0] - np.asarray(other)
        return Series(out)

    def __rsub__(self, other):
        return (-self).__add__(other)

    def __neg__(self):
        return Series(-self.c)

    def __mul__(self, other):
        if not isinstance(other, Series):
            return Series(self.c * np.asarray(other))
        a, b = self.c, other.c
        n, d = a.shape[0], a.shape[1]
        av, bv = a[:, 0], b[:, 0]
        elem = np.broadcast_shapes(a.shape[2:], b.shape[2:])
        out = np.empty((n, d) + elem)
        for k in range(n):
            # Cauchy coefficient k: value * (value, tangents) + tangents * value
            out[k] = np.einsum("i...,iu...->u...", av[: k + 1], b[k::-1])
            if d > 1:
                out[k, 1:] += np.einsum("i...,iu...->u...", bv[: k + 1], a[k::-1, 1:])
        return Series(out)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Series):
            raise NotImplementedError("series/series division is not supported")
        return Series(self.c / np.asarray(other))

    def __pow__(self, n):
        if not isinstance(n, int) or n < 1:
            raise ValueError("only positive integer powers are supported")
        out = self
        for _ in range(n - 1):
            out = out * self
        return out

    def __getitem__(self, key):
        return Series(self.c[:, :, key])

    @property
    def shape(self):
        return self.c.shape[2:]

    def sum0(self) -> "Series":
        """Sum over the leading element axis, keeping it as size 1."""
        return Series(self.c.sum(axis=2, keepdims=True))


def _elementwise_pair(a: Series, f0, f1) -> tuple[np.ndarray, np.ndarray]:
    """Value/tangent blocks of f applied to coefficient 0, f1 = f'."""
    a0 = a.c[0]
    val = f0(a0[:1])
    out = np.concatenate([val, f1(a0[:1]) * a0[1:]], axis=0)
    return out, a0


def sin(a: Series) -> Series:
    s, c = _sincos(a)
    return s


def cos(a: Series) -> Series:
    s, c = _sincos(a)
    return c


def _sincos(a: Series) -> tuple[Series, Series]:
    n = a.c.shape[0]
    s = np.zeros_like(a.c)
    c = np.zeros_like(a.c)
    s[0], _ = _elementwise_pair(a, np.sin, np.cos)
    c[0], _ = _elementwise_pair(a, np.cos, lambda v: -np.sin(v))
    for k in range(1, n):
        acc_s = np.zeros_like(s[0])
        acc_c = np.zeros_like(c[0])
        for j in range(1, k + 1):
            acc_s += j * _dmul(a.c[j], c[k - j])
            acc_c -= j * _dmul(a.c[j], s[k - j])
        s[k] = acc_s / k
        c[k] = acc_c / k
    return Series(s), Series(c)


def exp(a: Series) -> Series:
    n = a.c.shape[0]
    e = np.zeros_like(a.c)
    e[0], _ = _elementwise_pair(a, np.exp, np.exp)
    for k in range(1, n):
        acc = np.zeros_like(e[0])
        for j in range(1, k + 1):
            acc += j * _dmul(a.c[j], e[k - j])
        e[k] = acc / k
    return Series(e)


# -- container helpers usable on Series and plain arrays alike --------------

_I120 = [1, 2, 0]
_I201 = [2, 0, 1]


def concat(parts):
    """Concatenate along the leading element axis."""
    if any(isinstance(p, Series) for p in parts):
        return Series(np.concatenate([p.c for p in parts], axis=2))
    return np.concatenate(parts, axis=0)


def dot(a, b):
    """Inner product over the leading element axis, kept as a size-1 axis."""
    m = a * b
    if isinstance(m, Series):
        return m.sum0()
    return m.sum(axis=0, keepdims=True)


def cross(a, b):
    """Cross product of 3-vectors laid out along the leading element axis."""
    return a[_I120] * b[_I201] - a[_I201] * b[_I120]


# ---------------------------------------------------------------------------
# Systems and jet tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SmoothSystem:
    """A smooth dynamics/observation pair on a flat state space.

    ``dynamics(x, u)`` and ``observation(x)`` must be pure functions written
    with operations that accept both plain arrays of shape ``(dim, B)`` and
    :class:`Series` values (slicing, arithmetic, and the helpers ``concat``,
    ``dot``, ``cross`` from this module all qualify).
    """

    state_dim: int
    input_dim: int
    obs_dim: int
    dynamics: Callable
    observation: Callable

    def __post_init__(self):
        for name in ("state_dim", "input_dim", "obs_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")


@dataclass
class JetTable:
    """Lie derivatives of the observation and their state gradients.

    ``coefficients[j]`` is the j-th Lie derivative of the observation along the
    dynamics field, evaluated at the expansion point; ``gradients[j]`` is its
    Jacobian with respect to the state.
    """

    order: int
    coefficients: np.ndarray  # (order + 1, obs_dim)
    gradients: np.ndarray  # (order + 1, obs_dim, state_dim)

    def __post_init__(self):
        if self.order < 0:
            raise ValueError("order must be non-negative")
        if len(self.coefficients) != self.order + 1:
            raise ValueError("coefficient count must be order + 1")
        if len(self.gradients) != self.order + 1:
            raise ValueError("gradient count must be order + 1")

    def truncated(self, order: int) -> "JetTable":
        if order > self.order:
            raise ValueError("cannot truncate upward")
        return JetTable(order, self.coefficients[: order + 1], self.gradients[: order + 1])


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[:, None], False
    return x, True


def _flow_jet(sys: SmoothSystem, x, u, order: int, with_tangents: bool) -> Series:
    """Taylor expansion of the flow at x under constant input u."""
    if order < 0:
        raise ValueError("order must be non-negative")
    xb, _ = _as_batch(x)
    ub, _ = _as_batch(u)
    jet = Series.seed(xb, order, with_tangents)
    for k in range(order):
        # coefficient k of f depends only on flow coefficients 0..k
        fx = sys.dynamics(Series(jet.c[: k + 1]), ub)
        coeff = fx.c[k]
        if not np.all(np.isfinite(coeff)):
            raise NumericsError(f"non-finite dynamics value at Taylor order {k + 1}")
        jet.c[k + 1] = coeff / (k + 1)
    return jet


def taylor_flow(sys: SmoothSystem, x, u, order: int) -> np.ndarray:
    """Taylor coefficients of t -> x(t) at t = 0 under constant input.

    Returns an array of shape ``(order + 1, state_dim)`` (a batch axis is
    appended if ``x`` carries one); entry j is (1/j!) d^j x / dt^j.
    """
    _, batched = _as_batch(x)
    jet = _flow_jet(sys, x, u, order, with_tangents=False)
    coeffs = jet.c[:, 0]
    return coeffs if batched else coeffs[..., 0]


def _lie_arrays(sys: SmoothSystem, x, u, order: int, with_tangents: bool):
    jet = _flow_jet(sys, x, u, order, with_tangents)
    y = sys.observation(jet)
    if not np.all(np.isfinite(y.c)):
        raise NumericsError("non-finite observation value in Taylor recursion")
    fact = np.array([math.factorial(j) for j in range(order + 1)])
    shape_pad = (1,) * (y.c.ndim - 1)
    yc = y.c * fact.reshape((order + 1,) + shape_pad)
    coeffs = yc[:, 0]  # (order + 1, p, B)
    grads = np.swapaxes(yc[:, 1:], 1, 2)  # (order + 1, p, n, B)
    return coeffs, grads


def lie_gradients(sys: SmoothSystem, x, u, order: int):
    """Batched Lie derivatives and gradients.

    ``x`` of shape ``(n, B)`` (``u`` either ``(m,)`` or ``(m, B)``) gives
    coefficients of shape ``(order + 1, p, B)`` and gradients of shape
    ``(order + 1, p, n, B)``.
    """
    return _lie_arrays(sys, x, u, order, with_tangents=True)


def lie_table(sys: SmoothSystem, x, u, order: int) -> JetTable:
    """Lie derivatives L_f^j h and their state gradients at a single point."""
    coeffs, grads = _lie_arrays(sys, x, u, order, with_tangents=True)
    return JetTable(order, coeffs[..., 0], grads[..., 0])


def gradient_check(sys: SmoothSystem, x, u, order: int, step: float) -> float:
    """Worst relative deviation of the jet gradients from central differences.

    The finite-difference table perturbs the state by ``step`` along every
    basis direction; the deviation for each order is normalized by the larger
    of 1 and the gradient magnitude at that order.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    table = lie_table(sys, x, u, order)
    offsets = np.concatenate([np.eye(n), -np.eye(n)], axis=1) * step
    coeffs, _ = _lie_arrays(sys, x[:, None] + offsets, u, order, with_tangents=False)
    fd = (coeffs[..., :n] - coeffs[..., n:]) / (2.0 * step)  # (order+1, p, n)
    worst = 0.0
    for j in range(order + 1):
        scale = max(1.0, np.max(np.abs(table.gradients[j])))
        worst = max(worst, np.max(np.abs(fd[j] - table.gradients[j])) / scale)
    return worst


# ---------------------------------------------------------------------------
# Plain numeric integration (shared oracle machinery)
# ---------------------------------------------------------------------------


def rk4_step(f: Callable, x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """One classical Runge-Kutta step of xdot = f(x, u)."""
    k1 = f(x, u)
    k2 = f(x + 0.5 * dt * k1, u)
    k3 = f(x + 0.5 * dt * k2, u)
    k4 = f(x + dt * k3, u)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NumericsError("non-finite state in RK4 step")
    return out


def flow(sys: SmoothSystem, x, u, t: float, max_step: float = 0.01) -> np.ndarray:
    """Integrate the system over [0, t] with fixed-step RK4 substeps."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if t == 0.0:
        return x.copy()
    n_sub = max(1, int(math.ceil(abs(t) / max_step)))
    dt = t / n_sub
    for _ in range(n_sub):
        x = rk4_step(sys.dynamics, x, u, dt)
    return x


# ---------------------------------------------------------------------------
# Canonical test systems
# ---------------------------------------------------------------------------


def integrator_chain(length: int) -> SmoothSystem:
    """Chain xdot_i = x_{i+1}, xdot_last = 0, observing the head component.

    The chain of length n has local observability index n - 1.
    """
    if length < 1:
        raise ValueError("length must be >= 1")

    def dynamics(x, u):
        return concat([x[1:length], x[0:1] * 0.0])

    def observation(x):
        return x[0:1] * 1.0

    return SmoothSystem(length, 1, 1, dynamics, observation)

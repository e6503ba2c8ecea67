"""Observability quantification: rank tests, the STLOG, and its asymptotics.

The short-term local observability Gramian (STLOG) of order r over a horizon T
is the double sum

    W = sum_{i,j=0}^{r}  T^(i+j+1) / ((i+j+1) i! j!) * Gi^T M Gj,

with ``Gj = D(L_f^j h)`` the Lie-derivative gradients and ``M`` a positive-
definite metric on the observation space (the inverse measurement covariance).
Its minimum eigenvalue vanishes exactly when the stacked-gradient
observability matrix is rank deficient, and otherwise scales as
``T^(2 r* + 1)`` where r* is the local observability index; the Hilbert-matrix
minimum eigenvalue supplies an unconditional lower-bound constant for that
scaling, and the restricted singular value an upper one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import liealg, model
from .liealg import NumericsError, SmoothSystem

__all__ = [
    "DEFAULT_RANK_TOL",
    "ObservabilityMatrix",
    "GramianReport",
    "AsymptoticsScan",
    "obs_matrix",
    "rank_test_matrix",
    "local_index",
    "index_lower_bound",
    "stlog",
    "stlog_matrix",
    "stlog_min_eig",
    "log_oracle",
    "hilbert_block",
    "hilbert_min_eig",
    "asymptotic_scan",
    "scan_rows",
]

DEFAULT_RANK_TOL = 1e-8


# ---------------------------------------------------------------------------
# Observability matrices and the local index
# ---------------------------------------------------------------------------


@dataclass
class ObservabilityMatrix:
    """Stacked Lie-derivative gradients with an SVD-thresholded rank."""

    order: int
    blocks: np.ndarray  # ((order+1)*obs_dim, state_dim)
    rank: int
    rank_tol: float

    def __post_init__(self):
        rows, cols = self.blocks.shape
        if self.rank > min(rows, cols):
            raise ValueError("rank cannot exceed matrix dimensions")


def _svd_rank(m: np.ndarray, rank_tol: float) -> int:
    sv = np.linalg.svd(m, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.sum(sv > rank_tol * sv[0]))


def obs_matrix(sys: SmoothSystem, x, u, order: int, rank_tol: float = DEFAULT_RANK_TOL) -> ObservabilityMatrix:
    """Observability matrix from Lie-derivative gradients of orders 0..order."""
    table = liealg.lie_table(sys, _vec(x), _vec(u), order)
    blocks = table.gradients.reshape((order + 1) * sys.obs_dim, sys.state_dim)
    return ObservabilityMatrix(order, blocks, _svd_rank(blocks, rank_tol), rank_tol)


def rank_test_matrix(x) -> np.ndarray:
    """Hand-derived rank-test matrix of the range-plus-attitude system.

    Stacks the nonzero gradient rows contributed by the drift and thrust
    fields up to third order; at a generic state it attains rank 10 and loses
    rank when the relative position is parallel to the relative velocity.
    """
    if not isinstance(x, model.RelativeState):
        x = model.RelativeState.from_vec(np.asarray(x, dtype=float))
    e3 = np.array([0.0, 0.0, 1.0])
    m = np.zeros((10, 10))
    m[0, 0:3] = x.r
    m[1:5, 3:7] = np.eye(4)
    m[5, 0:3] = x.v
    m[5, 7:10] = x.r
    m[6, 7:10] = 2.0 * x.v
    m[7, 0:3] = model.rot_mat(x.q) @ e3
    m[7, 3:7] = model.jplus(x.q) @ x.r
    m[8, 0:3] = -e3
    m[9, 7:10] = -2.0 * e3
    return m


def local_index(sys: SmoothSystem, x, u, max_order: int, rank_tol: float = DEFAULT_RANK_TOL):
    """Smallest order r with a full-rank observability matrix, or None.

    Returns None if the rank stays below the state dimension for every
    r <= max_order.
    """
    if max_order < 0:
        raise ValueError("max_order must be non-negative")
    table = liealg.lie_table(sys, _vec(x), _vec(u), max_order)
    for r in range(max_order + 1):
        blocks = table.gradients[: r + 1].reshape((r + 1) * sys.obs_dim, sys.state_dim)
        if _svd_rank(blocks, rank_tol) == sys.state_dim:
            return r
    return None


def index_lower_bound(s: int, dim_z: int) -> int:
    """Smallest r with s*(r+1) >= dim_z: a floor on the local index when only
    s observation channels touch a dim_z-dimensional sub-state."""
    if s < 1 or dim_z < 1:
        raise ValueError("s and dim_z must be positive integers")
    return -(-dim_z // s) - 1


def _vec(z) -> np.ndarray:
    if isinstance(z, model.RelativeState) or isinstance(z, model.ControlInput):
        return z.vec
    return np.asarray(z, dtype=float)


# ---------------------------------------------------------------------------
# STLOG
# ---------------------------------------------------------------------------


@dataclass
class GramianReport:
    """A symmetric PSD Gramian with its eigen-decomposition and provenance."""

    matrix: np.ndarray
    order: int
    horizon: float
    metric: np.ndarray
    eigenvalues: np.ndarray = field(init=False)
    min_eigenvalue: float = field(init=False)

    def __post_init__(self):
        w = self.matrix
        scale = np.max(np.abs(w)) or 1.0
        if np.max(np.abs(w - w.T)) > 1e-12 * scale:
            raise NumericsError("Gramian lost symmetry beyond rounding tolerance")
        self.eigenvalues = np.linalg.eigvalsh(w)
        if self.eigenvalues[0] < -1e-10 * scale:
            raise NumericsError("Gramian is not positive semi-definite beyond rounding")
        self.min_eigenvalue = float(self.eigenvalues[0])


def _series_coefficients(order: int, horizon: float) -> np.ndarray:
    """Coefficient table T^(i+j+1) / ((i+j+1) i! j!)."""
    i = np.arange(order + 1)
    ipj = i[:, None] + i[None, :]
    fact = np.array([math.factorial(k) for k in range(order + 1)], dtype=float)
    return horizon ** (ipj + 1) / ((ipj + 1) * fact[:, None] * fact[None, :])


def stlog_matrix(grads: np.ndarray, horizon: float, metric: np.ndarray) -> np.ndarray:
    """STLOG from precomputed Lie gradients (r+1, p, n[, B])."""
    order = grads.shape[0] - 1
    coef = _series_coefficients(order, horizon)
    gm = np.einsum("pq,jqn...->jpn...", metric, grads)
    w = np.einsum("ij,ipm...,jpn...->mn...", coef, grads, gm, optimize=True)
    return 0.5 * (w + np.swapaxes(w, 0, 1))


def _metric_factor(metric: np.ndarray) -> np.ndarray:
    """Factor R with metric = R^T R."""
    return np.linalg.cholesky(metric).T


def stlog_factor(grads: np.ndarray, horizon: float, metric: np.ndarray) -> np.ndarray:
    """Square-root factor B with W = horizon * B^T B, shape (rp, n, B).

    Built from the metric Cholesky factor, the horizon/factorial column
    scalings, and the Cholesky factor of the Hilbert block.
    """
    r1, p, n = grads.shape[:3]
    g = grads if grads.ndim == 4 else grads[..., None]
    fact = np.array([math.factorial(k) for k in range(r1)], dtype=float)
    scale = horizon ** np.arange(r1) / fact
    rfac = _metric_factor(metric)
    m = np.einsum("pq,jqnb,j->jpnb", rfac, g, scale)
    hc = np.linalg.cholesky(scipy.linalg.hilbert(r1))
    b = np.einsum("ji,jpnb->ipnb", hc, m)
    return np.sqrt(horizon) * b.reshape(r1 * p, n, g.shape[3])


def stlog_min_eig(grads: np.ndarray, horizon: float, metric: np.ndarray):
    """Minimum STLOG eigenvalue and eigenvector via the PSD square-root factor.

    Computing eigenvalues of the assembled Gramian floors out at
    eps * lambda_max; the singular values of the factor stay accurate down to
    eps * sqrt(lambda_max), which matters both for tiny horizons and for the
    strongly scale-split metrics used by the controller.  Returns
    ``(lambda_min[, B], v (n[, B]))``.
    """
    r1, p, n = grads.shape[:3]
    batched = grads.ndim == 4
    b = stlog_factor(grads, horizon, metric).transpose(2, 0, 1)
    nb = b.shape[0]
    if r1 * p < n:
        # fewer stacked rows than state directions: the Gramian is singular
        # by construction and the last right singular vector spans its kernel
        vt = np.linalg.svd(b, compute_uv=True, full_matrices=True)[2]
        lam = np.zeros(nb)
    else:
        sv, vt = np.linalg.svd(b, compute_uv=True)[1:]
        lam = sv[:, -1] ** 2
    vec = vt[:, -1, :].T
    if batched:
        return lam, vec
    return float(lam[0]), vec[:, 0]


def stlog(sys: SmoothSystem, x, u, horizon: float, order: int, metric: np.ndarray) -> GramianReport:
    """Order-r STLOG of the system at (x, u) over the given horizon."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if order < 0:
        raise ValueError("order must be non-negative")
    metric = np.asarray(metric, dtype=float)
    if np.max(np.abs(metric - metric.T)) > 1e-12 * max(np.max(np.abs(metric)), 1e-300):
        raise ValueError("metric must be symmetric positive definite")
    table = liealg.lie_table(sys, _vec(x), _vec(u), order)
    w = stlog_matrix(table.gradients, horizon, metric)
    return GramianReport(w, order, horizon, metric)


def log_oracle(
    sys: SmoothSystem,
    x,
    u,
    horizon: float,
    metric: np.ndarray,
    n_quad: int,
    fd_step: float = 1e-6,
    max_step: float = 1e-3,
) -> np.ndarray:
    """Local observability Gramian by quadrature of flow sensitivities.

    Integrates DA_t^T M DA_t over [0, horizon] with Gauss-Legendre nodes,
    where DA_t is the Jacobian of the observation along the flow, obtained by
    central finite differences of RK4-integrated perturbed states.  This is
    the brute-force cross-check for :func:`stlog` and shares none of its
    Taylor machinery.
    """
    if n_quad < 2:
        raise ValueError("n_quad must be at least 2")
    xv = _vec(x)
    uv = _vec(u)
    n = xv.shape[0]
    nodes, weights = np.polynomial.legendre.leggauss(n_quad)
    times = 0.5 * horizon * (nodes + 1.0)
    weights = 0.5 * horizon * weights
    order_idx = np.argsort(times)

    steps = fd_step * np.maximum(1.0, np.abs(xv))
    offsets = np.concatenate([np.diag(steps), -np.diag(steps)], axis=1)
    states = xv[:, None] + offsets  # (n, 2n)
    ub = uv[:, None]

    w = np.zeros((n, n))
    t_now = 0.0
    for k in order_idx:
        t_target = times[k]
        span = t_target - t_now
        if span > 0:
            n_sub = max(1, int(math.ceil(span / max_step)))
            dt = span / n_sub
            for _ in range(n_sub):
                states = liealg.rk4_step(sys.dynamics, states, ub, dt)
            t_now = t_target
        y = sys.observation(states)  # (p, 2n)
        da = (y[:, :n] - y[:, n:]) / (2.0 * steps)  # (p, n)
        w += weights[k] * (da.T @ metric @ da)
    return 0.5 * (w + w.T)


# ---------------------------------------------------------------------------
# Hilbert blocks
# ---------------------------------------------------------------------------


def hilbert_block(order: int) -> np.ndarray:
    """Matrix with entries 1/(i+j+1) for i, j = 0..order."""
    if order < 0:
        raise ValueError("order must be non-negative")
    return scipy.linalg.hilbert(order + 1)


def hilbert_min_eig(order: int) -> float:
    """Minimum eigenvalue of the order-r Hilbert block."""
    return float(np.linalg.eigvalsh(hilbert_block(order))[0])


# ---------------------------------------------------------------------------
# Asymptotic scan
# ---------------------------------------------------------------------------


@dataclass
class AsymptoticsScan:
    """Minimum-eigenvalue decay of the STLOG across shrinking horizons."""

    horizons: np.ndarray
    min_eigs: np.ndarray
    fitted_exponent: float
    r_star: int | None
    lower_bounds: np.ndarray
    upper_bounds: np.ndarray
    fit_residual: float
    warnings: list[str]


def restricted_sigma_min(gradients: np.ndarray, r_star: int, rank_tol: float = DEFAULT_RANK_TOL) -> float:
    """sigma_min of the order-r* observability matrix restricted to the
    numerical kernel of the order-(r*-1) matrix."""
    p, n = gradients.shape[1], gradients.shape[2]
    o_full = gradients[: r_star + 1].reshape((r_star + 1) * p, n)
    if r_star == 0:
        return float(np.linalg.svd(o_full, compute_uv=False)[-1])
    o_prev = gradients[:r_star].reshape(r_star * p, n)
    sv, vt = np.linalg.svd(o_prev, compute_uv=True)[1:]
    keep = np.ones(n, dtype=bool)
    keep[: sv.size] = ~(sv > rank_tol * (sv[0] if sv.size else 1.0))
    kernel = vt.T[:, keep]
    if kernel.shape[1] == 0:
        raise ValueError("previous-order matrix already has full rank")
    return float(np.linalg.svd(o_full @ kernel, compute_uv=False)[-1])


def asymptotic_scan(
    sys: SmoothSystem,
    x,
    u,
    order: int,
    horizons,
    metric: np.ndarray | None = None,
    upper_margin: float = 1.0,
    fit_residual_tol: float = 0.2,
    rank_tol: float = DEFAULT_RANK_TOL,
) -> AsymptoticsScan:
    """Scan lambda_min(W^(r)) over horizons and fit the decay exponent.

    Bound checks use the Hilbert-matrix constant below and the restricted
    singular value (times 1 + upper_margin) above; both are evaluated only at
    horizons <= 1 where they apply.  Violations and a poor exponent fit are
    reported in ``warnings`` rather than raised.
    """
    horizons = np.asarray(horizons, dtype=float)
    if np.any(horizons <= 0) or np.any(np.diff(horizons) >= 0):
        raise ValueError("horizons must be positive and strictly decreasing")
    metric = np.eye(sys.obs_dim) if metric is None else np.asarray(metric, dtype=float)

    table = liealg.lie_table(sys, _vec(x), _vec(u), order)
    lams = np.array([stlog_min_eig(table.gradients, t, metric)[0] for t in horizons])

    warnings: list[str] = []
    r_star_rank = None
    for r in range(order + 1):
        blocks = table.gradients[: r + 1].reshape((r + 1) * sys.obs_dim, sys.state_dim)
        if _svd_rank(blocks, rank_tol) == sys.state_dim:
            r_star_rank = r
            break

    lower = np.zeros_like(horizons)
    upper = np.full_like(horizons, np.inf)
    if r_star_rank is None:
        # rank-deficient at every order scanned: eigenvalues should be zero
        scale = np.array(
            [np.max(np.abs(stlog_matrix(table.gradients, t, metric))) for t in horizons]
        )
        if np.any(lams > 1e-12 * scale):
            warnings.append("rank-deficient case produced nonzero minimum eigenvalues")
        return AsymptoticsScan(horizons, lams, float("nan"), None, lower, upper, float("nan"), warnings)

    rfac = _metric_factor(metric)
    scaled_grads = np.einsum("pq,jqn->jpn", rfac, table.gradients)
    o_star = scaled_grads[: r_star_rank + 1].reshape((r_star_rank + 1) * sys.obs_dim, sys.state_dim)
    sig_full = float(np.linalg.svd(o_star, compute_uv=False)[-1])
    sig_restr = restricted_sigma_min(scaled_grads, r_star_rank, rank_tol)
    fac2 = math.factorial(r_star_rank) ** 2
    expo = 2 * r_star_rank + 1
    lower = hilbert_min_eig(order) * horizons**expo * sig_full**2 / fac2
    upper = (1.0 + upper_margin) * horizons**expo * sig_restr**2 / (fac2 * expo)

    applicable = horizons <= 1.0
    if np.any(lams[applicable] < lower[applicable] * (1 - 1e-9)):
        warnings.append("lower bound violated at some horizon <= 1")
    if np.any(lams[applicable] > upper[applicable] * (1 + 1e-9)):
        warnings.append("upper bound violated at some horizon <= 1")

    if np.any(lams <= 0):
        warnings.append("nonpositive minimum eigenvalue in an observable configuration")
        return AsymptoticsScan(horizons, lams, float("nan"), None, lower, upper, float("nan"), warnings)

    logt = np.log(horizons)
    logl = np.log(lams)
    slope, intercept = np.polyfit(logt, logl, 1)
    resid = float(np.max(np.abs(logl - (slope * logt + intercept))))
    if resid > fit_residual_tol:
        warnings.append(f"exponent fit residual {resid:.3g} above threshold {fit_residual_tol:.3g}")
    detected = int(round((slope - 1.0) / 2.0))
    return AsymptoticsScan(horizons, lams, float(slope), detected, lower, upper, resid, warnings)


def scan_rows(scan: AsymptoticsScan):
    """CSV-ready rows: (dt, lambda_min, lower_bound, upper_bound)."""
    return [
        (scan.horizons[i], scan.min_eigs[i], scan.lower_bounds[i], scan.upper_bounds[i])
        for i in range(len(scan.horizons))
    ]

"""EKF on the relative state, plus the Gramian-based precision laws.

The filter runs in information form so the posterior information is the prior
information plus H^T Sigma^-1 H; with the range-plus-attitude observation the
velocity columns of H are zero and a single update can never tighten the
velocity block, which is the pathology that motivates horizon-based
observability control.  ``stlog_precision_update`` applies the stage-wise
covariance law: posterior information = Gramian / correlation-timescale +
prior information, together with its min-eigenvalue bound.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.linalg

from . import liealg, model, noise, obsv
from .liealg import SmoothSystem

__all__ = [
    "EkfConfig",
    "Belief",
    "predict",
    "update",
    "innovation",
    "stlog_precision_update",
    "ic_posterior_mc",
    "IcPosteriorResult",
    "repair_count",
    "reset_repair_count",
]

logger = logging.getLogger(__name__)

_REPAIRS = 0


def repair_count() -> int:
    """Number of covariance floor repairs since the last reset."""
    return _REPAIRS


def reset_repair_count() -> None:
    global _REPAIRS
    _REPAIRS = 0


@dataclass
class EkfConfig:
    """Noise configuration: per-input process variances, measurement
    covariance built from the range variance and the per-rotation-axis
    attitude variance, and the filter step."""

    thrust_var: float = 0.05
    rate_var: float = 1.49e-5
    range_var: float = 0.008
    attitude_var: float = 3.594e-6
    dt: float = 0.1
    fd_step: float = 1e-6
    quadratic_range_moments: bool = True

    def __post_init__(self):
        for name in ("thrust_var", "rate_var", "range_var", "attitude_var", "dt"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def input_variances(self) -> np.ndarray:
        """Variances of the 8 input channels (leader then follower)."""
        return np.array([self.thrust_var] + [self.rate_var] * 3 + [self.thrust_var] + [self.rate_var] * 3)

    @property
    def measurement_cov(self) -> np.ndarray:
        """5x5 observation covariance.

        The per-rotation-axis attitude variance maps to quaternion components
        through the small-angle relation dq = dphi / 2, so each quaternion
        slot carries attitude_var / 4 (the scalar slot included, keeping the
        matrix positive definite).
        """
        return np.diag([self.range_var] + [self.attitude_var / 4.0] * 4)


@dataclass
class Belief:
    """Gaussian state belief; mean may be a RelativeState or a flat vector."""

    mean: object
    covariance: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        self.covariance = np.asarray(self.covariance, dtype=float)
        n = self.mean_vec.shape[0]
        if self.covariance.shape != (n, n):
            raise ValueError("covariance shape must match the mean dimension")
        scale = max(np.max(np.abs(self.covariance)), 1e-300)
        if np.max(np.abs(self.covariance - self.covariance.T)) > 1e-12 * scale:
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(self.covariance)[0] <= 0:
            raise ValueError("covariance must be positive definite")

    @property
    def mean_vec(self) -> np.ndarray:
        if isinstance(self.mean, model.RelativeState):
            return self.mean.vec
        return np.asarray(self.mean, dtype=float)


def _wrap_mean(template, vec: np.ndarray):
    if isinstance(template, model.RelativeState):
        return model.RelativeState.from_vec(vec)
    return vec


def _repair_spd(p: np.ndarray, context: str) -> np.ndarray:
    """Symmetrize, and floor eigenvalues if roundoff broke positive-definiteness.

    Negative eigenvalues within the rounding floor (1e-12 of the spectrum top)
    are clipped silently; anything worse counts as a logged repair.
    """
    global _REPAIRS
    p = 0.5 * (p + p.T)
    eigs = np.linalg.eigvalsh(p)
    if eigs[0] <= 0:
        top = max(eigs[-1], 1e-300)
        if eigs[0] < -1e-12 * top:
            _REPAIRS += 1
            logger.warning("covariance floor repair in %s (min eig %.3e)", context, eigs[0])
        floor = 1e-15 * top
        w, v = np.linalg.eigh(p)
        p = (v * np.clip(w, floor, None)) @ v.T
    return p


def _flow_with_jacobians(xv, uv, dt, step_fn, fd_step):
    """Propagated mean plus FD Jacobians w.r.t. state and input."""
    n, m = xv.shape[0], uv.shape[0]
    sx = fd_step * np.maximum(1.0, np.abs(xv))
    su = fd_step * np.maximum(1.0, np.abs(uv))
    cols_x = np.concatenate([np.diag(sx), -np.diag(sx)], axis=1)
    cols_u = np.concatenate([np.diag(su), -np.diag(su)], axis=1)
    xs = np.concatenate([xv[:, None], xv[:, None] + cols_x, np.repeat(xv[:, None], 2 * m, axis=1)], axis=1)
    us = np.concatenate([uv[:, None], np.repeat(uv[:, None], 2 * n, axis=1), uv[:, None] + cols_u], axis=1)
    out = step_fn(xs, us, dt)
    mean = out[:, 0]
    phi = (out[:, 1 : 1 + n] - out[:, 1 + n : 1 + 2 * n]) / (2.0 * sx[None, :])
    binp = (out[:, 1 + 2 * n : 1 + 2 * n + m] - out[:, 1 + 2 * n + m :]) / (2.0 * su[None, :])
    return mean, phi, binp


def predict(b: Belief, u, cfg: EkfConfig, sys: SmoothSystem | None = None) -> Belief:
    """Propagate the belief over one filter step.

    The mean advances by RK4; the covariance by Phi P Phi^T + Q with Phi the
    finite-difference flow Jacobian and Q the input variances pushed through
    the input Jacobian of the discrete step.
    """
    xv = b.mean_vec
    uv = u.vec if isinstance(u, model.ControlInput) else np.asarray(u, dtype=float)
    if sys is None:
        step_fn = model.step_rk4
    else:
        def step_fn(xs, us, dt):
            return liealg.rk4_step(sys.dynamics, xs, us, dt)

    mean, phi, binp = _flow_with_jacobians(xv, uv, cfg.dt, step_fn, cfg.fd_step)
    q = (binp * cfg.input_variances[None, :]) @ binp.T
    cov = _repair_spd(phi @ b.covariance @ phi.T + q, "predict")
    return Belief(_wrap_mean(b.mean, mean), cov, b.timestamp + cfg.dt)


def innovation(b: Belief, y) -> np.ndarray:
    """Measurement residual y - h(mean)."""
    yv = y.vec if isinstance(y, model.Observation) else np.asarray(y, dtype=float)
    return yv - model.observe_vec(b.mean_vec)


def update(b: Belief, y, cfg: EkfConfig) -> Belief:
    """Measurement update realizing the information addition
    posterior_info = prior_info + H^T Sigma^-1 H.

    The covariance is evaluated in Joseph form, which is algebraically the
    same update but keeps positive-definiteness at condition numbers where
    the literal double inversion of the information matrix loses it.
    """
    xv = b.mean_vec
    h = model.observation_jacobian(xv)
    sig = cfg.measurement_cov.copy()
    innov = innovation(b, y)
    if cfg.quadratic_range_moments:
        # the half-squared-range channel is quadratic, so its Gaussian belief
        # moments are exact at second order: correct the predicted mean by
        # tr(P_rr)/2 and inflate its variance by tr(P_rr^2)/2; without this
        # the filter turns overconfident as soon as position uncertainty grows
        p_rr = b.covariance[0:3, 0:3]
        innov = innov.copy()
        innov[0] -= 0.5 * np.trace(p_rr)
        sig[0, 0] += 0.5 * float(np.sum(p_rr * p_rr))
    innov_cov = h @ b.covariance @ h.T + sig
    gain = scipy.linalg.cho_solve(scipy.linalg.cho_factor(innov_cov), h @ b.covariance).T
    ikh = np.eye(xv.shape[0]) - gain @ h
    cov = ikh @ b.covariance @ ikh.T + gain @ sig @ gain.T
    cov = _repair_spd(cov, "update")
    mean = xv + gain @ innov
    if isinstance(b.mean, model.RelativeState):
        mean[3:7] /= np.linalg.norm(mean[3:7])
    return Belief(_wrap_mean(b.mean, mean), cov, b.timestamp)


def stlog_precision_update(p_prior: np.ndarray, w, delta_t: float) -> np.ndarray:
    """Stage-wise posterior covariance (W / delta_t + P_prior^-1)^-1.

    Also asserts the precision bound: the posterior max-eigenvalue inverse is
    at least lambda_min(W)/delta_t plus the prior max-eigenvalue inverse.
    """
    if delta_t <= 0:
        raise ValueError("delta_t must be positive")
    w_mat = w.matrix if isinstance(w, obsv.GramianReport) else np.asarray(w, dtype=float)
    p_prior = np.asarray(p_prior, dtype=float)
    info = w_mat / delta_t + np.linalg.inv(p_prior)
    post = np.linalg.inv(info)
    post = 0.5 * (post + post.T)
    lam_w = np.linalg.eigvalsh(0.5 * (w_mat + w_mat.T))[0]
    lhs = 1.0 / np.linalg.eigvalsh(post)[-1]
    rhs = max(lam_w, 0.0) / delta_t + 1.0 / np.linalg.eigvalsh(p_prior)[-1]
    if lhs < rhs * (1.0 - 1e-9) - 1e-30:
        raise liealg.NumericsError("stage precision bound violated beyond rounding")
    return post


class IcPosteriorResult(NamedTuple):
    empirical: np.ndarray
    predicted: np.ndarray


def _fd_jacobian(fun, x0: np.ndarray, out_dim: int, eps: float = 1e-7) -> np.ndarray:
    jac = np.empty((out_dim, x0.size))
    for i in range(x0.size):
        dx = np.zeros_like(x0)
        dx[i] = eps
        jac[:, i] = (fun(x0 + dx) - fun(x0 - dx)) / (2 * eps)
    return jac


def ic_posterior_mc(
    linear_sys: SmoothSystem,
    prior: Belief,
    noise_spec: noise.NoiseSpec,
    n_trials: int,
    seed: int = 0,
    samples_per_band: int = 4,
) -> IcPosteriorResult:
    """Monte Carlo check of the initial-condition posterior covariance.

    Draws the initial state from the prior, observes the linear response over
    [0, T] corrupted by a sampled noise path, solves the Sigma^-1-weighted
    least-squares estimate of the initial state from the discretized path, and
    compares the covariance of the estimation error against the predicted
    (W / delta_t + P0^-1)^-1.
    """
    n = linear_sys.state_dim
    p = linear_sys.obs_dim
    t_total = noise_spec.horizon
    mean0 = prior.mean_vec

    a_mat = _fd_jacobian(lambda z: linear_sys.dynamics(z, np.zeros(linear_sys.input_dim)), mean0, n)
    c_mat = _fd_jacobian(linear_sys.observation, mean0, p)

    # response Jacobian M(t) = C expm(A t) and the continuous-information Gramian
    nodes, weights = np.polynomial.legendre.leggauss(64)
    tq = 0.5 * t_total * (nodes + 1.0)
    wq = 0.5 * t_total * weights
    sig = noise_spec.sigma
    sig_inv = np.linalg.inv(sig) if np.linalg.det(sig) > 0 else np.eye(p)
    w_gram = np.zeros((n, n))
    for t, wgt in zip(tq, wq):
        m = c_mat @ scipy.linalg.expm(a_mat * t)
        w_gram += wgt * m.T @ sig_inv @ m
    prior_info = np.linalg.inv(prior.covariance)
    predicted = np.linalg.inv(w_gram / noise_spec.delta_t + prior_info)

    # discretized estimator
    n_samp = samples_per_band * noise_spec.n_c
    ts = (np.arange(n_samp) + 0.5) * (t_total / n_samp)
    m_stack = np.stack([c_mat @ scipy.linalg.expm(a_mat * t) for t in ts])  # (ns, p, n)
    wgt = (t_total / n_samp) / noise_spec.delta_t
    info = wgt * np.einsum("kpi,pq,kqj->ij", m_stack, sig_inv, m_stack) + prior_info
    chol = scipy.linalg.cho_factor(info)

    rng_root = np.random.SeedSequence(seed)
    prior_rng = np.random.default_rng(rng_root.spawn(1)[0])
    l_prior = np.linalg.cholesky(prior.covariance)
    path_seeds = rng_root.spawn(n_trials)

    errors = np.empty((n_trials, n))
    for k in range(n_trials):
        x0 = mean0 + l_prior @ prior_rng.standard_normal(n)
        path = noise.sample_path(noise_spec, path_seeds[k])
        y = np.einsum("kpn,n->kp", m_stack, x0 - mean0) + path(ts).T  # residual path
        rhs = wgt * np.einsum("kpi,pq,kq->i", m_stack, sig_inv, y)
        est = mean0 + scipy.linalg.cho_solve(chol, rhs)
        errors[k] = est - x0
    empirical = errors.T @ errors / n_trials
    return IcPosteriorResult(empirical, predicted)

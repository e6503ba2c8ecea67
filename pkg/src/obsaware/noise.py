"""Band-limited white observation noise with a power-law tail.

The process is a Gaussian series over Legendre polynomials orthonormal under
the 1/T-weighted inner product on [0, T]: the first N_c components carry equal
energy 1/N_c with spatial covariance Sigma, and components beyond the band
decay as a_n n^(-alpha).  Sampling truncates the tail at ``n_trunc`` terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NoiseSpec",
    "NoisePath",
    "legendre_basis",
    "legendre_values",
    "sample_path",
    "covariance_eigs",
]


def legendre_values(horizon: float, order: int, t) -> np.ndarray:
    """Values of the orthonormal basis e_0..e_order at times t in [0, horizon].

    Orthonormality is with respect to (1/T) * integral over [0, T]; hence
    e_n(t) = sqrt(2n + 1) * P_n(2t/T - 1) with P_n the Legendre polynomials,
    evaluated by the three-term recurrence.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t < -1e-12) or np.any(t > horizon * (1 + 1e-12)):
        raise ValueError("evaluation times must lie in [0, horizon]")
    s = 2.0 * t / horizon - 1.0
    out = np.empty((order + 1, t.size))
    out[0] = 1.0
    if order >= 1:
        out[1] = s
    for k in range(1, order):
        out[k + 1] = ((2 * k + 1) * s * out[k] - k * out[k - 1]) / (k + 1)
    return out * np.sqrt(2.0 * np.arange(order + 1) + 1.0)[:, None]


def legendre_basis(horizon: float, order: int):
    """Evaluator t -> (order+1, len(t)) of the orthonormal basis."""
    if order < 0:
        raise ValueError("order must be non-negative")

    def evaluate(t):
        return legendre_values(horizon, order, t)

    return evaluate


@dataclass
class NoiseSpec:
    """Parameters of the band-limited noise process."""

    horizon: float
    n_c: int
    alpha: float
    sigma: np.ndarray
    tail_coeffs: np.ndarray | float = 1.0
    n_trunc: int | None = None
    allow_semidefinite: bool = False

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=float)
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.n_c <= 1:
            raise ValueError("bandwidth parameter must exceed 1")
        if self.alpha <= 1:
            raise ValueError("decay exponent must exceed 1")
        if self.n_trunc is None:
            # tail energy beyond 4*N_c is below 1% of the band for alpha >= 2
            self.n_trunc = 4 * self.n_c
        if self.n_trunc < self.n_c:
            raise ValueError("truncation order must be at least the bandwidth")
        if np.max(np.abs(self.sigma - self.sigma.T)) > 1e-12 * max(np.max(np.abs(self.sigma)), 1e-300):
            raise ValueError("sigma must be symmetric")
        eigs = np.linalg.eigvalsh(self.sigma)
        floor = -1e-12 * max(eigs[-1], 0.0)
        if eigs[0] < floor or (not self.allow_semidefinite and eigs[0] <= 0.0):
            raise ValueError("sigma must be positive definite")

    @property
    def obs_dim(self) -> int:
        return self.sigma.shape[0]

    @property
    def delta_t(self) -> float:
        """Correlation timescale T / N_c."""
        return self.horizon / self.n_c

    def component_scales(self) -> np.ndarray:
        """Per-component amplitude multipliers: 1/sqrt(N_c) in the band,
        sqrt(a_n n^-alpha) in the tail."""
        n = np.arange(self.n_trunc, dtype=float)
        tail = np.broadcast_to(np.asarray(self.tail_coeffs, dtype=float), (self.n_trunc,))
        scales = np.where(
            n < self.n_c,
            1.0 / np.sqrt(self.n_c),
            np.sqrt(tail * np.where(n > 0, n, 1.0) ** (-self.alpha)),
        )
        return scales


@dataclass
class NoisePath:
    """A sampled realization, evaluable anywhere on [0, horizon]."""

    spec: NoiseSpec
    coefficients: np.ndarray  # (n_trunc, obs_dim)
    _basis: object = field(init=False, repr=False)

    def __post_init__(self):
        self._basis = legendre_basis(self.spec.horizon, self.spec.n_trunc - 1)

    def __call__(self, t) -> np.ndarray:
        """Noise value(s) at time(s) t, shape (obs_dim,) or (obs_dim, len(t))."""
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        vals = self._basis(t_arr)  # (n_trunc, nt)
        out = self.coefficients.T @ vals
        return out[:, 0] if np.isscalar(t) or np.ndim(t) == 0 else out


def _spatial_factor(sigma: np.ndarray) -> np.ndarray:
    """A with sigma = A A^T, tolerant of semidefinite sigma."""
    eigs, vecs = np.linalg.eigh(sigma)
    return vecs * np.sqrt(np.clip(eigs, 0.0, None))


def sample_path(spec: NoiseSpec, seed) -> NoisePath:
    """Draw one path; identical seeds give bit-identical coefficients."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((spec.n_trunc, spec.obs_dim))
    chi = z @ _spatial_factor(spec.sigma).T
    coeffs = spec.component_scales()[:, None] * chi
    return NoisePath(spec, coeffs)


def covariance_eigs(spec: NoiseSpec, n: int) -> np.ndarray:
    """Covariance-operator eigenvalues of the n-th Legendre band.

    For each spatial eigenvalue s_i of sigma the band contributes s_i / N_c
    below the bandwidth and a_n n^(-alpha) s_i above it.
    """
    if n < 0:
        raise ValueError("band index must be non-negative")
    spatial = np.linalg.eigvalsh(spec.sigma)
    if n < spec.n_c:
        return spatial / spec.n_c
    tail = np.broadcast_to(np.asarray(spec.tail_coeffs, dtype=float), (max(spec.n_trunc, n + 1),))
    return tail[n] * float(n) ** (-spec.alpha) * spatial

"""Closed-loop Monte Carlo evaluation of the leader-follower localization.

A trial simulates the relative-state truth under commanded inputs corrupted by
per-step input noise, feeds range-plus-attitude observations corrupted by
band-limited noise paths to the EKF at 10 Hz, and (in ``opc`` mode) closes the
loop through the receding-horizon controller on the current estimate.  Noise
realizations depend only on the trial seed, never on the follower mode, so
campaigns across modes are seed-paired.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import estimator, liealg, model, noise, opc

__all__ = [
    "GRAVITY",
    "ZigzagShape",
    "ScenarioConfig",
    "TrialResult",
    "run_trial",
    "run_campaign",
    "metric_3sigma_area",
    "trial_csv_rows",
    "campaign_summary_dict",
]

GRAVITY = 9.81

_MODES = ("straight", "zigzag", "opc")


@dataclass
class ZigzagShape:
    """Lateral triangle-wave follower excursion (position amplitude, period)."""

    amplitude: float = 2.0
    period: float = 8.0
    harmonics: int = 3


def _sim_solver() -> opc.SolverSettings:
    # warm replans run every stage; a short leash per solve is enough
    return opc.SolverSettings(max_iterations=5, max_evals=8, penalty_init=1e4, penalty_rounds=2)


@dataclass
class ScenarioConfig:
    """One simulation setup: timing, noise, mode, priors, and seeds."""

    duration: float = 120.0
    ekf: estimator.EkfConfig = field(default_factory=estimator.EkfConfig)
    follower_mode: str = "straight"
    leader_speed: float = 1.0
    zigzag: ZigzagShape = field(default_factory=ZigzagShape)
    opc: opc.OpcConfig = field(default_factory=lambda: opc.OpcConfig(solver=_sim_solver()))
    noise_seeds: list | None = None
    trials: int = 50
    base_seed: int = 20240
    initial_state: model.RelativeState = field(
        default_factory=lambda: model.RelativeState(r=[3.0, 0.0, 0.0])
    )
    initial_covariance: np.ndarray = field(
        default_factory=lambda: np.diag([0.25] * 3 + [1e-4] * 4 + [0.25] * 3)
    )
    init_error: bool = True
    noise_enabled: bool = True
    noise_window: float = 2.0
    noise_alpha: float = 2.0
    divergence_bound: float = 50.0

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.trials < 1:
            raise ValueError("at least one trial is required")
        if self.follower_mode not in _MODES:
            raise ValueError(f"follower_mode must be one of {_MODES}")
        self.initial_covariance = np.asarray(self.initial_covariance, dtype=float)

    def seeds(self) -> list:
        if self.noise_seeds is not None:
            return list(self.noise_seeds)
        return [self.base_seed + i for i in range(self.trials)]

    def observation_noise_spec(self) -> noise.NoiseSpec:
        # correlation timescale delta_t = window / n_c = 0.01 s
        n_c = max(2, int(round(self.noise_window / 0.01)))
        return noise.NoiseSpec(
            horizon=self.noise_window,
            n_c=n_c,
            alpha=self.noise_alpha,
            sigma=self.ekf.measurement_cov,
        )


@dataclass
class TrialResult:
    """Time series and summary metrics of one closed-loop run."""

    time: np.ndarray
    truth: np.ndarray  # (steps, 10)
    estimate: np.ndarray  # (steps, 10)
    error: np.ndarray  # (steps, 3) position error
    sigma: np.ndarray  # (steps, 3) estimated position std
    summary: dict
    diverged: bool
    seed: object = None


def metric_3sigma_area(sigma_series, dt: float) -> float:
    """Trapezoidal integral of the 3-sigma envelope [m s]."""
    sigma_series = np.asarray(sigma_series, dtype=float)
    if np.any(sigma_series < 0):
        raise ValueError("sigma values cannot be negative")
    return float(np.trapezoid(3.0 * sigma_series, dx=dt))


# ---------------------------------------------------------------------------
# Command generators
# ---------------------------------------------------------------------------


def _trim_input() -> np.ndarray:
    return np.array([GRAVITY, 0.0, 0.0, 0.0, GRAVITY, 0.0, 0.0, 0.0])


def _zigzag_follower_input(shape: ZigzagShape, t: float) -> np.ndarray:
    """Thrust and roll rate tracking a smoothed lateral triangle wave.

    The triangle wave is represented by its leading odd Fourier harmonics so
    the flat-output accelerations stay bounded; thrust magnitude and roll rate
    follow from pointing the body axis along the desired acceleration.
    """
    acc = 0.0
    jerk = 0.0
    scale = shape.amplitude * 8.0 / np.pi**2
    for j in range(shape.harmonics):
        k = 2 * j + 1
        w = 2.0 * np.pi * k / shape.period
        sgn = (-1.0) ** j
        acc += -scale * sgn * w**2 * np.sin(w * t) / k**2
        jerk += -scale * sgn * w**3 * np.cos(w * t) / k**2
    thrust = float(np.hypot(acc, GRAVITY))
    roll_rate = -jerk * GRAVITY / (GRAVITY**2 + acc**2)
    return np.array([GRAVITY, 0.0, 0.0, 0.0, thrust, roll_rate, 0.0, 0.0])


def _opc_config_for_sim(cfg: ScenarioConfig) -> opc.OpcConfig:
    """Collapse the leader input bounds onto straight-flight trim."""
    trim = _trim_input()
    lo = cfg.opc.input_lo.copy()
    hi = cfg.opc.input_hi.copy()
    lo[0:4] = trim[0:4]
    hi[0:4] = trim[0:4]
    return replace(cfg.opc, input_lo=lo, input_hi=hi)


# ---------------------------------------------------------------------------
# Trial loop
# ---------------------------------------------------------------------------


def _sample_initial_truth(cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    x = cfg.initial_state.vec.copy()
    if cfg.init_error:
        delta = np.linalg.cholesky(cfg.initial_covariance) @ rng.standard_normal(10)
        x = x + delta
        x[3:7] /= np.linalg.norm(x[3:7])
    return x


def run_trial(cfg: ScenarioConfig, seed) -> TrialResult:
    """Run one closed-loop trial; deterministic given (cfg, seed)."""
    root = np.random.SeedSequence(seed)
    input_seed, obs_seed, init_seed = root.spawn(3)
    input_rng = np.random.default_rng(input_seed)
    init_rng = np.random.default_rng(init_seed)

    dt = cfg.ekf.dt
    n_steps = int(round(cfg.duration / dt))
    input_std = np.sqrt(cfg.ekf.input_variances)
    obs_spec = cfg.observation_noise_spec()
    steps_per_window = max(1, int(round(cfg.noise_window / dt)))

    truth = _sample_initial_truth(cfg, init_rng)
    belief = estimator.Belief(cfg.initial_state, cfg.initial_covariance, 0.0)

    sys = model.cls_system()
    opc_cfg = _opc_config_for_sim(cfg) if cfg.follower_mode == "opc" else None
    plan = None
    steps_per_stage = max(1, int(round(opc_cfg.stage_dt / dt))) if opc_cfg else 0
    u_cmd = _trim_input()

    times = np.empty(n_steps)
    truth_log = np.empty((n_steps, 10))
    est_log = np.empty((n_steps, 10))
    err_log = np.empty((n_steps, 3))
    sig_log = np.empty((n_steps, 3))
    diverged = False

    window_path = None
    window_idx = -1

    for k in range(n_steps):
        t = k * dt
        try:
            # command for this step
            if cfg.follower_mode == "straight":
                u_cmd = _trim_input()
            elif cfg.follower_mode == "zigzag":
                u_cmd = _zigzag_follower_input(cfg.zigzag, t)
            else:
                if k % steps_per_stage == 0:
                    if plan is None:
                        cold = replace(opc_cfg, solver=replace(opc_cfg.solver, max_iterations=40, max_evals=60))
                        plan = opc.solve(sys, belief.mean, None, cold)
                        u_first = plan.inputs[0]
                    else:
                        u_first, plan = opc.receding_horizon_step(sys, belief.mean, plan, opc_cfg)
                    u_cmd = u_first.copy()

            # vehicles track their commands; the localization side receives a
            # noisy copy of the inputs.  Noise draws happen even when disabled
            # so seed streams stay aligned across configurations.
            w_in = input_rng.standard_normal(8) * input_std
            truth = model.step_rk4(truth, u_cmd, dt)
            u_received = u_cmd + w_in if cfg.noise_enabled else u_cmd
            belief = estimator.predict(belief, u_received, cfg.ekf)

            # observation at the filter rate, noise from the current window
            # path; samples sit at in-window midpoints because the Legendre
            # construction has a strongly inflated variance right at the
            # window endpoints
            t_obs = t + 0.5 * dt
            wi = int(t_obs / cfg.noise_window)
            if wi != window_idx:
                window_idx = wi
                window_path = noise.sample_path(obs_spec, np.random.SeedSequence([_seed_entropy(obs_seed), wi]))
            eta = window_path(t_obs - window_idx * cfg.noise_window)
            y = model.observe_vec(truth) + (eta if cfg.noise_enabled else 0.0)
            belief = estimator.update(belief, y, cfg.ekf)
        except (liealg.NumericsError, ValueError, np.linalg.LinAlgError):
            # estimator blow-up: flag, hold the last logged values, stop early
            diverged = True
            times[k:] = t + dt
            truth_log[k:] = truth_log[k - 1] if k else cfg.initial_state.vec
            est_log[k:] = est_log[k - 1] if k else cfg.initial_state.vec
            err_log[k:] = err_log[k - 1] if k else 0.0
            sig_log[k:] = sig_log[k - 1] if k else 0.0
            break

        est = belief.mean_vec
        times[k] = t + dt
        truth_log[k] = truth
        est_log[k] = est
        err_log[k] = est[0:3] - truth[0:3]
        sig_log[k] = np.sqrt(np.diag(belief.covariance)[0:3])
        if np.linalg.norm(err_log[k]) > cfg.divergence_bound:
            diverged = True

    summary = {}
    for i, axis in enumerate("xyz"):
        abs_err = np.abs(err_log[:, i])
        summary[axis] = {
            "min": float(abs_err.min()),
            "max": float(abs_err.max()),
            "rms": float(np.sqrt(np.mean(err_log[:, i] ** 2))),
            "area3sigma": metric_3sigma_area(sig_log[:, i], dt),
        }
    return TrialResult(times, truth_log, est_log, err_log, sig_log, summary, diverged, seed)


def _seed_entropy(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# Campaigns
# ---------------------------------------------------------------------------


def _trial_task(args):
    cfg, mode, seed = args
    return run_trial(replace(cfg, follower_mode=mode), seed)


def run_campaign(cfg: ScenarioConfig, modes, workers: int | None = None) -> dict:
    """Run seed-paired trials for each mode and aggregate the summaries.

    Returns {mode: {"trials": [TrialResult...], "aggregate": {axis: metrics}}}
    with aggregate metrics averaged across trials.
    """
    modes = list(modes)
    if not modes:
        raise ValueError("at least one mode is required")
    for mode in modes:
        if mode not in _MODES:
            raise ValueError(f"unknown mode {mode!r}")
    seeds = cfg.seeds()
    tasks = [(cfg, mode, seed) for mode in modes for seed in seeds]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_trial_task, tasks, chunksize=1))
    else:
        results = [_trial_task(t) for t in tasks]

    out = {}
    idx = 0
    for mode in modes:
        trials = results[idx : idx + len(seeds)]
        idx += len(seeds)
        agg = {}
        for axis in "xyz":
            agg[axis] = {
                key: float(np.mean([tr.summary[axis][key] for tr in trials]))
                for key in ("min", "max", "rms", "area3sigma")
            }
        out[mode] = {
            "trials": trials,
            "aggregate": agg,
            "diverged": int(sum(tr.diverged for tr in trials)),
        }
    return out


# ---------------------------------------------------------------------------
# Writers
# ---------------------------------------------------------------------------

TRIAL_CSV_HEADER = (
    "t,truth_rx,truth_ry,truth_rz,truth_vx,truth_vy,truth_vz,"
    "est_rx,est_ry,est_rz,est_vx,est_vy,est_vz,"
    "err_x,err_y,err_z,sigma_x,sigma_y,sigma_z"
)


def trial_csv_rows(result: TrialResult):
    """Rows matching TRIAL_CSV_HEADER."""
    for k in range(result.time.size):
        tr = result.truth[k]
        es = result.estimate[k]
        yield (
            result.time[k],
            *tr[0:3],
            *tr[7:10],
            *es[0:3],
            *es[7:10],
            *result.error[k],
            *result.sigma[k],
        )


def campaign_summary_dict(campaign: dict) -> dict:
    """JSON-ready aggregate: {mode: {axis: {min,max,rms,area3sigma}}}."""
    return {
        mode: {
            "aggregate": data["aggregate"],
            "diverged": data["diverged"],
            "trials": len(data["trials"]),
        }
        for mode, data in campaign.items()
    }


def campaign_to_json(campaign: dict) -> str:
    return json.dumps(campaign_summary_dict(campaign), indent=2, sort_keys=True)

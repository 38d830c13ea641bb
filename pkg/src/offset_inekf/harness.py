"""Monte Carlo comparison of the two filters on the synthetic squat.

Each trial simulates one noisy run, perturbs the initial velocity and
orientation estimate, runs a filter and records the estimation errors.
Trials are aggregated into RMSE-over-trials curves and convergence-time
statistics.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from joblib import Parallel, delayed
from scipy.spatial.transform import Rotation

from .data import NoiseSpec
from .estimators import ContactInEKF, OffsetInEKF
from .lie import GroupState
from .simulator import (
    FrameOffsets,
    MotionProfile,
    generate_trajectory,
    synthesize_imu,
    synthesize_leg_odometry,
    to_sensor_array,
)

FILTERS = ("proposed", "baseline")
DIVERGENCE_LIMIT = 1e3
NOT_CONVERGED = float("inf")


@dataclass(frozen=True)
class TrialConfig:
    """Everything that defines one trial except the filter.

    ``sensor_noise`` drives the simulated sensors; ``proposed_noise`` and
    ``baseline_noise`` are the filter tunings.  Initial velocity errors are
    drawn uniformly in ``[-vel_error, vel_error]`` per axis and orientation
    errors uniformly in ``[-rot_error, rot_error]`` per axis, composed as
    ``Rz Ry Rx``.
    """

    seed: int = 0
    profile: MotionProfile = field(default_factory=MotionProfile)
    offsets: FrameOffsets = field(default_factory=FrameOffsets.from_magnitudes)
    sensor_noise: NoiseSpec = field(default_factory=NoiseSpec.proposed)
    proposed_noise: NoiseSpec = field(default_factory=NoiseSpec.proposed)
    baseline_noise: NoiseSpec = field(default_factory=NoiseSpec.baseline)
    vel_error: float = 1.0
    rot_error: float = float(np.radians(30.0))
    sd_position: float = 0.05
    vel_threshold: float = 0.1
    rot_threshold: float = float(np.radians(5.0))
    hold: float = 1.0
    rate_halfwidth: int = 10
    rate_bias_correction: bool = True
    excitation_gate: float = 3.0

    def __post_init__(self):
        if self.vel_error < 0 or self.rot_error < 0 or self.sd_position < 0:
            raise ValueError("error ranges and sd_position must be nonnegative")
        if self.excitation_gate < 0:
            raise ValueError("excitation_gate must be nonnegative")
        if self.vel_threshold <= 0 or self.rot_threshold <= 0 or self.hold < 0:
            raise ValueError("thresholds must be positive and hold nonnegative")

    def with_seed(self, seed):
        return replace(self, seed=int(seed))

    def to_dict(self):
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, FrameOffsets):
                value = {"dR": value.dR.tolist(), "dp": value.dp.tolist()}
            elif isinstance(value, (MotionProfile, NoiseSpec)):
                value = asdict(value)
            out[f.name] = value
        return out


def config_hash(cfg):
    """Short stable digest of a configuration (seed excluded)."""
    d = cfg.to_dict()
    d.pop("seed", None)
    blob = json.dumps(d, sort_keys=True, default=float)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class TrialResult:
    """Per-step errors of one filter on one trial.

    ``rpy_err`` holds the world-frame components of ``log(R_hat R^T)``
    (roll, pitch, yaw about x, y, z).  Offsets are estimate minus truth;
    ``dR_err`` is the angle of ``dR_hat dR^T``.  After a divergence the
    remaining rows are NaN.
    """

    filter: str
    seed: int
    t: np.ndarray
    vel_err: np.ndarray
    rpy_err: np.ndarray
    dR_err: np.ndarray
    dp_err: np.ndarray
    dp_est: np.ndarray
    dR_est: np.ndarray
    convergence_time: float
    rot_convergence_time: float
    diverged: bool
    divergence_step: int
    n_rejected: int
    seconds_per_step: float

    def __len__(self):
        return self.t.shape[0]

    def final_errors(self):
        k = len(self) - 1
        return {
            "velocity": float(np.linalg.norm(self.vel_err[k])),
            "roll": float(abs(self.rpy_err[k, 0])),
            "pitch": float(abs(self.rpy_err[k, 1])),
            "yaw": float(abs(self.rpy_err[k, 2])),
            "dR": float(self.dR_err[k]),
            "dp": self.dp_err[k].tolist(),
        }


def convergence_time(err, t, threshold, hold):
    """First time after which ``err`` stays below ``threshold`` for ``hold`` s.

    Parameters
    ----------
    err : array_like of shape (n,)
        Error magnitudes sampled at times ``t``.
    t : array_like of shape (n,)
        Increasing sample times.
    threshold : float
        Strictly positive bound; ``err < threshold`` counts as converged.
    hold : float
        Length of the window ``[t*, t* + hold]`` that must stay below the
        threshold.  The window has to lie within the series.

    Returns
    -------
    float
        ``t* - t[0]``, or ``inf`` when no such time exists.
    """
    err = np.asarray(err, dtype=float)
    t = np.asarray(t, dtype=float)
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    if err.shape != t.shape or err.ndim != 1:
        raise ValueError("err and t must be 1-D of equal length")
    n = err.shape[0]
    t_end = t[-1] if n else -np.inf
    next_bad = np.inf
    best = NOT_CONVERGED
    # scan backwards tracking the time of the next violation
    for i in range(n - 1, -1, -1):
        if not err[i] < threshold:
            next_bad = t[i]
            continue
        # tolerance absorbs rounding in t[i] + hold on a uniform grid
        window_end = t[i] + hold + 1e-12
        if window_end <= t_end + 2e-12 and next_bad > window_end:
            best = t[i] - t[0]
    return best


class RmseAccumulator:
    """Streaming root-mean-square across trials, per time step."""

    def __init__(self, shape):
        self.count = 0
        self._mean_sq = np.zeros(shape)

    def add(self, err):
        err = np.asarray(err, dtype=float)
        self.count += 1
        self._mean_sq += (err**2 - self._mean_sq) / self.count

    @property
    def rmse(self):
        if self.count == 0:
            raise ValueError("no trials accumulated")
        return np.sqrt(self._mean_sq)


def sample_initial_errors(cfg):
    """Initial velocity and orientation perturbations of a trial."""
    rng = np.random.default_rng([int(cfg.seed), 2])
    dv = rng.uniform(-cfg.vel_error, cfg.vel_error, 3)
    angles = rng.uniform(-cfg.rot_error, cfg.rot_error, 3)
    dRot = Rotation.from_euler("ZYX", angles[::-1]).as_matrix()
    return dv, dRot


@dataclass(frozen=True, eq=False)
class SimulatedRun:
    traj: object
    sensors: np.ndarray
    initial_state: GroupState


def simulate(cfg):
    """Ground truth, sensor table and perturbed initial estimate of a trial."""
    traj = generate_trajectory(cfg.profile, cfg.offsets)
    imu = synthesize_imu(traj, cfg.sensor_noise, cfg.seed)
    odo = synthesize_leg_odometry(traj, None, cfg.sensor_noise, cfg.seed, cfg.sd_position)
    dv, dRot = sample_initial_errors(cfg)
    X0 = GroupState(dRot @ traj.R[0], traj.v[0] + dv, traj.p[0].copy(), np.eye(3), np.zeros(3))
    return SimulatedRun(traj, to_sensor_array(imu, odo), X0)


def make_filter(name, cfg, initial_state):
    if name == "proposed":
        n = cfg.proposed_noise
        return OffsetInEKF(
            sd_accel=n.sd_accel,
            sd_gyro=n.sd_gyro,
            sd_kin_meas=n.sd_kin_meas,
            sd_offset_p=n.sd_offset_p,
            sd_offset_R=n.sd_offset_R,
            rate_halfwidth=cfg.rate_halfwidth,
            rate_bias_correction=cfg.rate_bias_correction,
            excitation_gate=cfg.excitation_gate,
            initial_state=initial_state,
        )
    if name == "baseline":
        n = cfg.baseline_noise
        return ContactInEKF(
            sd_accel=n.sd_accel,
            sd_gyro=n.sd_gyro,
            sd_kin_meas=n.sd_kin_meas,
            sd_contact=n.sd_contact,
            initial_state=initial_state,
        )
    raise ValueError(f"unknown filter {name!r}; expected one of {FILTERS}")


def _rotation_errors(R_hat, R):
    return Rotation.from_matrix(np.einsum("nij,nkj->nik", R_hat, R)).as_rotvec()


def run_trial(cfg, filter="proposed", run=None):
    """Run one filter on one trial; divergence is recorded, not raised."""
    run = simulate(cfg) if run is None else run
    return run_trials([cfg], filter, [run])[0]


def run_trials(cfgs, filter="proposed", runs=None):
    """Run one filter on several trials at once as a stacked batch.

    The trials must differ only in their seed.  Each result equals what a
    separate :func:`run_trial` would give; ``seconds_per_step`` is the
    batch wall time shared out over all trials and steps.
    """
    if filter not in FILTERS:
        raise ValueError(f"unknown filter {filter!r}; expected one of {FILTERS}")
    cfgs = list(cfgs)
    if not cfgs:
        raise ValueError("no trials to run")
    ref = config_hash(cfgs[0])
    if any(config_hash(c) != ref for c in cfgs):
        raise ValueError("batched trials may differ only in their seed")
    runs = [simulate(c) for c in cfgs] if runs is None else list(runs)
    sensors = np.stack([r.sensors for r in runs])
    X0 = GroupState.stack([r.initial_state for r in runs])
    est = make_filter(filter, cfgs[0], X0)
    start = time.perf_counter()
    est.fit(sensors)
    elapsed = time.perf_counter() - start
    per_step = elapsed / (sensors.shape[0] * sensors.shape[1])
    results = []
    for b, (cfg, run) in enumerate(zip(cfgs, runs)):
        R_hat, v_hat = est.R_[b], est.v_[b]
        if filter == "proposed":
            dR_hat, dp_hat = est.dR_[b], est.dp_[b]
        else:
            dR_hat = np.broadcast_to(np.eye(3), R_hat.shape)
            dp_hat = np.zeros_like(v_hat)
        results.append(
            _trial_result(
                cfg, filter, run.traj, R_hat, v_hat, dR_hat, dp_hat,
                int(est.divergence_step_[b]), int(est.n_rejected_[b]), per_step,
            )
        )  # fmt: skip
    return results


def _trial_result(cfg, filter, traj, R_hat, v_hat, dR_hat, dp_hat, step, n_rejected, per_step):
    """Errors and convergence times of one filtered trial."""
    n = len(traj)
    m = n if step < 0 else step
    vel_err = np.full((n, 3), np.nan)
    rpy_err = np.full((n, 3), np.nan)
    dR_err = np.full(n, np.nan)
    dp_err = np.full((n, 3), np.nan)
    dp_est = np.full((n, 3), np.nan)
    dR_est = np.full((n, 3), np.nan)
    if m:
        vel_err[:m] = v_hat[:m] - traj.v[:m]
        rpy_err[:m] = _rotation_errors(R_hat[:m], traj.R[:m])
        dR_true = np.broadcast_to(cfg.offsets.dR, (m, 3, 3))
        dR_err[:m] = np.linalg.norm(_rotation_errors(dR_hat[:m], dR_true), axis=1)
        dp_err[:m] = dp_hat[:m] - cfg.offsets.dp
        dp_est[:m] = dp_hat[:m]
        dR_est[:m] = Rotation.from_matrix(dR_hat[:m]).as_rotvec()

    diverged = step >= 0
    norms = np.linalg.norm(vel_err[:m], axis=1)
    too_big = np.flatnonzero(~(norms <= DIVERGENCE_LIMIT))
    if too_big.size:
        diverged, step = True, int(too_big[0])
        for arr in (vel_err, rpy_err, dR_err, dp_err, dp_est, dR_est):
            arr[step:] = np.nan

    if diverged:
        conv = rot_conv = NOT_CONVERGED
    else:
        conv = convergence_time(
            np.linalg.norm(vel_err, axis=1), traj.t, cfg.vel_threshold, cfg.hold
        )
        rot_conv = convergence_time(
            np.linalg.norm(rpy_err[:, :2], axis=1), traj.t, cfg.rot_threshold, cfg.hold
        )
    return TrialResult(
        filter=filter,
        seed=int(cfg.seed),
        t=traj.t.copy(),
        vel_err=vel_err,
        rpy_err=rpy_err,
        dR_err=dR_err,
        dp_err=dp_err,
        dp_est=dp_est,
        dR_est=dR_est,
        convergence_time=float(conv),
        rot_convergence_time=float(rot_conv),
        diverged=bool(diverged),
        divergence_step=int(step),
        n_rejected=int(n_rejected),
        seconds_per_step=float(per_step),
    )


@dataclass(frozen=True, eq=False)
class FilterSummary:
    """Aggregate of one filter over all trials (diverged trials excluded
    from the RMSE curves)."""

    filter: str
    t: np.ndarray
    rmse_vel: np.ndarray
    rmse_rpy: np.ndarray
    rmse_dR: np.ndarray
    rmse_dp: np.ndarray
    max_abs_dp_err: np.ndarray
    convergence_times: np.ndarray
    rot_convergence_times: np.ndarray
    n_trials: int
    n_diverged: int
    seconds_per_step: float

    @property
    def median_convergence(self):
        return float(np.median(self.convergence_times))

    @property
    def iqr_convergence(self):
        # interpolating between two never-converged trials gives inf - inf
        with np.errstate(invalid="ignore"):
            q = np.percentile(self.convergence_times, [25, 75])
        q1, q3 = np.where(np.isnan(q), NOT_CONVERGED, q)
        return float(q1), float(q3)

    def final_rmse(self):
        return {
            "velocity": float(self.rmse_vel[-1]),
            "roll_deg": float(np.degrees(self.rmse_rpy[-1, 0])),
            "pitch_deg": float(np.degrees(self.rmse_rpy[-1, 1])),
            "yaw_deg": float(np.degrees(self.rmse_rpy[-1, 2])),
            "dR_deg": float(np.degrees(self.rmse_dR[-1])),
            "dp": self.rmse_dp[-1].tolist(),
        }

    def to_dict(self):
        q1, q3 = self.iqr_convergence
        return {
            "filter": self.filter,
            "n_trials": self.n_trials,
            "n_diverged": self.n_diverged,
            "median_convergence_s": _finite_or_none(self.median_convergence),
            "iqr_convergence_s": [_finite_or_none(q1), _finite_or_none(q3)],
            "median_rot_convergence_s": _finite_or_none(
                float(np.median(self.rot_convergence_times))
            ),
            "final_rmse": self.final_rmse(),
            "seconds_per_step": self.seconds_per_step,
        }


def _finite_or_none(x):
    return float(x) if np.isfinite(x) else None


def summarize(results):
    """Reduce the trials of a single filter into a :class:`FilterSummary`."""
    if not results:
        raise ValueError("no trial results")
    names = {r.filter for r in results}
    if len(names) != 1:
        raise ValueError(f"results mix filters {sorted(names)}")
    results = sorted(results, key=lambda r: r.seed)
    n = len(results[0])
    acc_v, acc_rpy = RmseAccumulator(n), RmseAccumulator((n, 3))
    acc_dR, acc_dp = RmseAccumulator(n), RmseAccumulator((n, 3))
    max_dp = np.zeros(3)
    ok = [r for r in results if not r.diverged]
    for r in ok:
        acc_v.add(np.linalg.norm(r.vel_err, axis=1))
        acc_rpy.add(r.rpy_err)
        acc_dR.add(r.dR_err)
        acc_dp.add(r.dp_err)
        max_dp = np.maximum(max_dp, np.max(np.abs(r.dp_err), axis=0))
    if not ok:
        nan = np.full(n, np.nan)
        curves = (nan, np.full((n, 3), np.nan), nan, np.full((n, 3), np.nan))
    else:
        curves = (acc_v.rmse, acc_rpy.rmse, acc_dR.rmse, acc_dp.rmse)
    return FilterSummary(
        filter=results[0].filter,
        t=results[0].t,
        rmse_vel=curves[0],
        rmse_rpy=curves[1],
        rmse_dR=curves[2],
        rmse_dp=curves[3],
        max_abs_dp_err=max_dp,
        convergence_times=np.array([r.convergence_time for r in results]),
        rot_convergence_times=np.array([r.rot_convergence_time for r in results]),
        n_trials=len(results),
        n_diverged=len(results) - len(ok),
        seconds_per_step=float(np.median([r.seconds_per_step for r in results])),
    )


@dataclass(frozen=True, eq=False)
class ExperimentSummary:
    config: TrialConfig
    seeds: tuple
    filters: dict
    trials: dict

    @property
    def speedup(self):
        """Baseline over proposed median velocity convergence time."""
        if "proposed" not in self.filters or "baseline" not in self.filters:
            return None
        num = self.filters["baseline"].median_convergence
        den = self.filters["proposed"].median_convergence
        if den == 0:
            return float("inf") if num > 0 else 1.0
        return num / den

    def to_dict(self):
        speedup = self.speedup
        return {
            "config_hash": config_hash(self.config),
            "n_trials": len(self.seeds),
            "seeds": list(self.seeds),
            "filters": {k: v.to_dict() for k, v in self.filters.items()},
            "speedup": None if speedup is None else _finite_or_none(speedup),
            "config": self.config.to_dict(),
        }


def _run_seeds(cfgs, filters):
    runs = [simulate(c) for c in cfgs]
    return [res for name in filters for res in run_trials(cfgs, name, runs)]


def run_experiment(n_trials=50, config=None, filters=FILTERS, first_seed=0, n_jobs=1):
    """Run ``n_trials`` seeded trials of each filter and aggregate them.

    Both filters see the same simulated sensors and initial estimate for a
    given seed.  The seeds are split into ``n_jobs`` stacked batches (see
    :func:`run_trials`) that run in parallel.  Results are ordered by seed
    before reduction, so the summary does not depend on ``n_jobs``.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    config = TrialConfig() if config is None else config
    filters = tuple(filters)
    for name in filters:
        if name not in FILTERS:
            raise ValueError(f"unknown filter {name!r}; expected one of {FILTERS}")
    seeds = tuple(range(first_seed, first_seed + n_trials))
    chunks = [c for c in np.array_split(np.array(seeds), max(1, min(n_jobs, n_trials))) if c.size]
    jobs = (delayed(_run_seeds)([config.with_seed(s) for s in c], filters) for c in chunks)
    trials = {name: [] for name in filters}
    for batch in Parallel(n_jobs=n_jobs)(jobs):
        for res in batch:
            trials[res.filter].append(res)
    for name in filters:
        trials[name].sort(key=lambda r: r.seed)
    summaries = {name: summarize(trials[name]) for name in filters}
    return ExperimentSummary(config, seeds, summaries, trials)


def write_summary_json(summary, path):
    with open(path, "w") as fh:
        json.dump(summary.to_dict(), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")

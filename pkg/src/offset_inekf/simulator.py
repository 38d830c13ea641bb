"""Synthetic squat motion with IMU and leg-odometry streams.

The chest (measurement frame ``M``) stands still, then squats: it moves
vertically and pitches about its own ``y`` axis, with a smooth ramp over the
first cycle so the motion is twice differentiable.  The IMU is mounted on the
chest with a fixed placement offset ``(dR, dp)``,

    R = R_M dR,    p = p_M - R_M dp,

and the stance contact sits at the world origin.  The leg odometry reports
the contact point position and velocity in ``M``,

    d_m = dR R^T (d - p) - dp.

IMU readings are interval averages: the reading at ``t_k`` is the constant
rate and specific force that carry the true ``(R, v)`` at ``t_k`` exactly to
its value at ``t_{k+1}`` under the strapdown step used by the filters.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

from .data import STANDARD_GRAVITY, ImuSample, LegOdometryMeasurement, NoiseSpec
from .lie import so3_exp, so3_left_jacobian_inv
from .validation import N_SENSOR_COLUMNS, SENSOR_COLUMNS, check_rotation, check_vector3

_Y = np.array([0.0, 1.0, 0.0])


@dataclass(frozen=True)
class MotionProfile:
    """Timing and amplitude of the stand-then-squat motion.

    Parameters
    ----------
    stand_duration, squat_duration : float
        Phase lengths [s]; either may be zero but not both.
    cycle_period : float
        Duration of one squat [s].
    vertical_amplitude : float
        Half the peak-to-peak chest height change [m].
    pitch_amplitude : float
        Largest chest pitch reached at the bottom of a squat [rad].
    sample_rate : float
        IMU and odometry rate [Hz].
    heading : float
        Constant yaw of the chest [rad].
    chest_position : tuple of 3 floats
        Standing chest position in the world [m]; the contact is at the origin.
    """

    stand_duration: float = 5.0
    squat_duration: float = 55.0
    cycle_period: float = 1.5
    vertical_amplitude: float = 0.25
    pitch_amplitude: float = float(np.radians(20.0))
    sample_rate: float = 100.0
    heading: float = 0.0
    chest_position: tuple = (0.0, 0.1, 1.3)

    def __post_init__(self):
        for name in ("stand_duration", "squat_duration", "cycle_period",
                     "vertical_amplitude", "pitch_amplitude", "sample_rate", "heading"):  # fmt: skip
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.stand_duration < 0 or self.squat_duration < 0:
            raise ValueError("phase durations must be nonnegative")
        if self.duration <= 0:
            raise ValueError("total duration must be positive")
        if self.cycle_period <= 0 or self.sample_rate <= 0:
            raise ValueError("cycle_period and sample_rate must be positive")
        object.__setattr__(
            self, "chest_position", tuple(check_vector3(self.chest_position, "chest_position"))
        )

    @property
    def duration(self):
        return self.stand_duration + self.squat_duration

    @property
    def n_samples(self):
        return int(round(self.duration * self.sample_rate))

    @property
    def dt(self):
        return 1.0 / self.sample_rate

    def with_duration(self, duration):
        """Same profile cut or extended to ``duration`` seconds in total."""
        stand = min(self.stand_duration, duration)
        return replace(self, stand_duration=stand, squat_duration=duration - stand)


@dataclass(frozen=True)
class FrameOffsets:
    """Pose of the IMU relative to the measurement frame."""

    dR: np.ndarray = field(default_factory=lambda: np.eye(3))
    dp: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "dR", check_rotation(self.dR, "dR"))
        object.__setattr__(self, "dp", check_vector3(self.dp, "dp"))

    @classmethod
    def from_magnitudes(cls, angle_deg=45.0, distance_m=0.12):
        """Rotation of ``angle_deg`` about ``z`` and a translation of
        ``distance_m`` along ``(1, -1, 1)``."""
        dR = so3_exp(np.radians(angle_deg) * np.array([0.0, 0.0, 1.0]))
        return cls(dR, distance_m * np.array([1.0, -1.0, 1.0]) / np.sqrt(3.0))

    @property
    def angle(self):
        return float(np.linalg.norm(Rotation.from_matrix(self.dR).as_rotvec()))


@dataclass(frozen=True)
class TrajectorySample:
    t: float
    R: np.ndarray
    v: np.ndarray
    p: np.ndarray
    d: np.ndarray
    d_m: np.ndarray
    d_m_dot: np.ndarray


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Sampled ground truth.

    ``R, v, p`` are the IMU pose and velocity, ``omega`` and ``accel`` its
    instantaneous body rate and specific force, and ``d_m``, ``d_m_dot`` the
    contact point seen from the measurement frame.
    """

    profile: MotionProfile
    offsets: FrameOffsets
    t: np.ndarray
    R: np.ndarray
    v: np.ndarray
    p: np.ndarray
    omega: np.ndarray
    accel: np.ndarray
    d: np.ndarray
    d_m: np.ndarray
    d_m_dot: np.ndarray
    g: np.ndarray

    def __len__(self):
        return self.t.shape[0]

    def __getitem__(self, k):
        return TrajectorySample(
            float(self.t[k]), self.R[k], self.v[k], self.p[k], self.d, self.d_m[k], self.d_m_dot[k]
        )

    @property
    def squat_onset(self):
        return self.profile.stand_duration


def _smootherstep(x):
    """Quintic ramp on [0, 1] and its first two derivatives."""
    x = np.clip(x, 0.0, 1.0)
    s = x**3 * (10.0 - 15.0 * x + 6.0 * x**2)
    ds = 30.0 * x**2 * (1.0 - x) ** 2
    dds = 60.0 * x * (1.0 - x) * (1.0 - 2.0 * x)
    return s, ds, dds


def _squat_shape(t, profile):
    """Unit squat waveform ``s(tau) (1 - cos(W tau))`` with two derivatives."""
    tau = np.maximum(t - profile.stand_duration, 0.0)
    W = 2.0 * np.pi / profile.cycle_period
    T = profile.cycle_period
    s, ds, dds = _smootherstep(tau / T)
    ds, dds = ds / T, dds / T**2
    c = 1.0 - np.cos(W * tau)
    dc = W * np.sin(W * tau)
    ddc = W**2 * np.cos(W * tau)
    f = s * c
    df = ds * c + s * dc
    ddf = dds * c + 2.0 * ds * dc + s * ddc
    return f, df, ddf


def _measurement_points(R, v, p, omega, offsets, d):
    """Contact point position and velocity in the measurement frame."""
    dR, dp = offsets.dR, offsets.dp
    body = np.einsum("nji,nj->ni", R, d - p)
    d_m = body @ dR.T - dp
    w_m = omega @ dR.T
    v_m = np.einsum("nji,nj->ni", R, v) @ dR.T
    d_m_dot = -np.cross(w_m, d_m + dp) - v_m
    return d_m, d_m_dot


def generate_trajectory(profile=None, offsets=None, g=STANDARD_GRAVITY):
    """Sample the ground-truth motion at ``profile.sample_rate``."""
    profile = MotionProfile() if profile is None else profile
    offsets = FrameOffsets() if offsets is None else offsets
    g = check_vector3(g, "gravity")
    n = profile.n_samples
    t = np.arange(n) / profile.sample_rate

    f, df, ddf = _squat_shape(t, profile)
    A = profile.vertical_amplitude
    half_pitch = 0.5 * profile.pitch_amplitude
    theta, dtheta, ddtheta = half_pitch * f, half_pitch * df, half_pitch * ddf

    # chest frame: fixed heading, pitch about its own y axis
    Rz = so3_exp(profile.heading * np.array([0.0, 0.0, 1.0]))
    R_M = Rz @ Rotation.from_rotvec(theta[:, None] * _Y).as_matrix()
    p_M = np.asarray(profile.chest_position) + np.outer(-A * f, [0.0, 0.0, 1.0])
    v_M = np.outer(-A * df, [0.0, 0.0, 1.0])
    a_M = np.outer(-A * ddf, [0.0, 0.0, 1.0])
    w_M = dtheta[:, None] * _Y
    al_M = ddtheta[:, None] * _Y

    dR, dp = offsets.dR, offsets.dp
    lever = np.cross(w_M, dp)
    R = R_M @ dR
    p = p_M - R_M @ dp
    v = v_M - np.einsum("nij,nj->ni", R_M, lever)
    acc = a_M - np.einsum("nij,nj->ni", R_M, np.cross(al_M, dp) + np.cross(w_M, lever))
    omega = w_M @ dR
    accel = np.einsum("nji,nj->ni", R, acc - g)

    d = np.zeros(3)
    d_m, d_m_dot = _measurement_points(R, v, p, omega, offsets, d)
    return Trajectory(profile, offsets, t, R, v, p, omega, accel, d, d_m, d_m_dot, g)


@dataclass(frozen=True, eq=False)
class ImuStream:
    t: np.ndarray
    a_tilde: np.ndarray
    omega_tilde: np.ndarray

    def __len__(self):
        return self.t.shape[0]

    def __getitem__(self, k):
        return ImuSample(float(self.t[k]), self.a_tilde[k], self.omega_tilde[k])


@dataclass(frozen=True, eq=False)
class OdometryStream:
    t: np.ndarray
    d_m: np.ndarray
    d_m_dot: np.ndarray

    def __len__(self):
        return self.t.shape[0]

    def __getitem__(self, k):
        return LegOdometryMeasurement(float(self.t[k]), self.d_m[k], self.d_m_dot[k])


def noiseless_imu(traj):
    """Interval-consistent IMU readings without noise."""
    n = len(traj)
    a = traj.accel.copy()
    w = traj.omega.copy()
    if n > 1:
        dt = np.diff(traj.t)
        rel = np.einsum("nji,njk->nik", traj.R[:-1], traj.R[1:])
        phi = Rotation.from_matrix(rel).as_rotvec()
        w[:-1] = phi / dt[:, None]
        dv = traj.v[1:] - traj.v[:-1] - np.outer(dt, traj.g)
        body = np.einsum("nji,nj->ni", traj.R[:-1], dv) / dt[:, None]
        for k in range(n - 1):
            a[k] = so3_left_jacobian_inv(phi[k]) @ body[k]
    return ImuStream(traj.t.copy(), a, w)


def _rng(seed, stream):
    return np.random.default_rng([int(seed), stream])


def synthesize_imu(traj, noise=None, seed=0):
    """IMU stream with additive white Gaussian noise (deterministic per seed)."""
    noise = NoiseSpec.proposed() if noise is None else noise
    clean = noiseless_imu(traj)
    rng = _rng(seed, 0)
    shape = clean.a_tilde.shape
    a = clean.a_tilde + noise.sd_accel * rng.standard_normal(shape)
    w = clean.omega_tilde + noise.sd_gyro * rng.standard_normal(shape)
    return ImuStream(clean.t, a, w)


def synthesize_leg_odometry(traj, offsets=None, noise=None, seed=0, sd_position=0.0):
    """Contact position and velocity in the measurement frame.

    ``offsets`` defaults to the offsets the trajectory was generated with.
    Passing other offsets places the measurement frame elsewhere on the same
    IMU motion.  White noise with SD ``noise.sd_kin_meas`` is added to the
    velocity and ``sd_position`` to the position.
    """
    noise = NoiseSpec.proposed() if noise is None else noise
    if offsets is None or offsets is traj.offsets:
        d_m, d_m_dot = traj.d_m, traj.d_m_dot
    else:
        d_m, d_m_dot = _measurement_points(traj.R, traj.v, traj.p, traj.omega, offsets, traj.d)
    rng = _rng(seed, 1)
    vel_noise = noise.sd_kin_meas * rng.standard_normal(d_m_dot.shape)
    pos_noise = sd_position * rng.standard_normal(d_m.shape)
    return OdometryStream(traj.t.copy(), d_m + pos_noise, d_m_dot + vel_noise)


def to_sensor_array(imu, odo=None):
    """Stack streams into a table with :data:`SENSOR_COLUMNS`.

    Odometry timestamps must be a subset of the IMU timestamps; rows without
    odometry hold NaN in the contact columns.
    """
    X = np.full((len(imu), N_SENSOR_COLUMNS), np.nan)
    X[:, 0] = imu.t
    X[:, 1:4] = imu.a_tilde
    X[:, 4:7] = imu.omega_tilde
    if odo is not None:
        idx = np.searchsorted(imu.t, odo.t)
        if np.any(idx >= len(imu)) or not np.allclose(imu.t[np.minimum(idx, len(imu) - 1)], odo.t):
            raise ValueError("odometry timestamps must coincide with IMU timestamps")
        X[idx, 7:10] = odo.d_m
        X[idx, 10:13] = odo.d_m_dot
    return X


def write_sensor_csv(path, X, digits=9):
    """Write a sensor table with a header row; NaN marks missing odometry."""
    X = np.asarray(X, dtype=float)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SENSOR_COLUMNS)
        for row in X:
            writer.writerow([format(x, f".{digits}g") for x in row])


def read_sensor_csv(path):
    """Read a table written by :func:`write_sensor_csv`."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != SENSOR_COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(SENSOR_COLUMNS)}")
        rows = [[float(x) for x in row] for row in reader if row]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return np.array(rows, dtype=float)


__all__ = [
    "MotionProfile",
    "FrameOffsets",
    "TrajectorySample",
    "Trajectory",
    "ImuStream",
    "OdometryStream",
    "generate_trajectory",
    "noiseless_imu",
    "synthesize_imu",
    "synthesize_leg_odometry",
    "to_sensor_array",
    "write_sensor_csv",
    "read_sensor_csv",
]

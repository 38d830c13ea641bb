"""Sensor records, noise settings and filter beliefs."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .lie import GroupState

STANDARD_GRAVITY = (0.0, 0.0, -9.81)


@dataclass(frozen=True)
class ImuSample:
    """One IMU reading, valid over ``[t, t + dt)``.

    ``a_tilde`` is the specific force [m/s^2] and ``omega_tilde`` the angular
    rate [rad/s], both in the IMU frame.
    """

    t: float
    a_tilde: np.ndarray
    omega_tilde: np.ndarray


@dataclass(frozen=True)
class LegOdometryMeasurement:
    """Contact point position ``d_m`` [m] and velocity ``d_m_dot`` [m/s].

    Both are expressed in the measurement frame.  The velocity-type
    measurement fed to the filter is ``y = -d_m_dot``.
    """

    t: float
    d_m: np.ndarray
    d_m_dot: np.ndarray

    @property
    def y(self):
        return -np.asarray(self.d_m_dot, dtype=float)


@dataclass(frozen=True)
class NoiseSpec:
    """Noise standard deviations.

    Attributes
    ----------
    sd_accel : float
        Accelerometer white noise [m/s^2].
    sd_gyro : float
        Gyroscope white noise [rad/s].
    sd_kin_meas : float
        Kinematic measurement noise; a velocity [m/s] for the offset-aware
        filter, a contact position [m] for the contact-position filter.
    sd_offset_p, sd_offset_R : float
        Random-walk intensity of the placement offsets [m/sqrt(s)],
        [rad/sqrt(s)].
    sd_contact : float
        Contact point random-walk intensity [m/s] (contact-position filter
        only; models foot slip).
    """

    sd_accel: float = 0.589
    sd_gyro: float = 0.055
    sd_kin_meas: float = 0.2
    sd_offset_p: float = 0.01
    sd_offset_R: float = 0.01
    sd_contact: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{f.name} must be finite and nonnegative, got {value!r}")

    @classmethod
    def proposed(cls):
        """Noise levels tuned for the offset-aware filter."""
        return cls(0.589, 0.055, 0.2, 0.01, 0.01, 0.0)

    @classmethod
    def baseline(cls):
        """Noise levels tuned for the contact-position filter."""
        return cls(0.5, 0.05, 0.05, 0.0, 0.0, 0.05)

    def scaled(self, factor):
        return type(self)(*(factor * getattr(self, f.name) for f in fields(self)))


@dataclass(frozen=True)
class WorldConstants:
    g: np.ndarray = None

    def __post_init__(self):
        g = np.array(STANDARD_GRAVITY if self.g is None else self.g, dtype=float)
        if g.shape != (3,) or not np.all(np.isfinite(g)):
            raise ValueError("gravity must be a finite 3-vector")
        object.__setattr__(self, "g", g)


@dataclass(frozen=True, eq=False)
class FilterBelief:
    """State estimate with the covariance of its right-invariant error.

    ``rejected`` is set when the most recent update was skipped because the
    innovation covariance was ill-conditioned.
    """

    X: GroupState
    P: np.ndarray
    rejected: bool = False

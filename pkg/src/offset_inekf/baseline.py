"""Contact-aided invariant EKF with a foot-position state.

This is the comparison filter: the state ``(R, v, p, d)`` adds the world
position ``d`` of the stance contact to the IMU extended pose, and the
kinematic measurement is the contact position ``d_m = R^T (d - p)``.  It
assumes the IMU frame and the measurement frame coincide, so with a real
placement offset its measurement model is wrong by construction.

Tangent vectors are 12-vectors ordered ``(rot, vel, pos, contact)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import NoiseSpec
from .lie import POS, ROT, VEL, T, mv, select, skew, so3_exp_and_jacobian
from .proposed import (
    COND_MAX,
    _gain,
    integrate_imu,
    joseph_update,
    propagate_covariance_factored,
)

BASELINE_DIM = 12
CONTACT = slice(9, 12)

_I3 = np.eye(3)


@dataclass(frozen=True, eq=False)
class BaselineState:
    """Extended pose plus world contact position ``d``; parts may be batched."""

    R: np.ndarray
    v: np.ndarray
    p: np.ndarray
    d: np.ndarray

    @property
    def batch_shape(self):
        return self.v.shape[:-1]

    def __getitem__(self, index):
        return type(self)(self.R[index], self.v[index], self.p[index], self.d[index])


def baseline_exp(zeta):
    zeta = np.asarray(zeta, dtype=float)
    E, J = so3_exp_and_jacobian(zeta[..., ROT])
    vpd = J @ np.stack((zeta[..., VEL], zeta[..., POS], zeta[..., CONTACT]), axis=-1)
    return BaselineState(E, vpd[..., 0], vpd[..., 1], vpd[..., 2])


def baseline_compose(X1, X2):
    R1 = X1.R
    vpd = R1 @ np.stack((X2.v, X2.p, X2.d), axis=-1)
    return BaselineState(
        R1 @ X2.R, vpd[..., 0] + X1.v, vpd[..., 1] + X1.p, vpd[..., 2] + X1.d
    )


def baseline_adjoint(X):
    R = X.R
    Ad = np.zeros(X.batch_shape + (BASELINE_DIM, BASELINE_DIM))
    for blk in (ROT, VEL, POS, CONTACT):
        Ad[..., blk, blk] = R
    Ad[..., VEL, ROT] = skew(X.v) @ R
    Ad[..., POS, ROT] = skew(X.p) @ R
    Ad[..., CONTACT, ROT] = skew(X.d) @ R
    return Ad


def baseline_error_jacobian(world):
    A = np.zeros((BASELINE_DIM, BASELINE_DIM))
    A[VEL, ROT] = skew(world.g)
    A[POS, VEL] = _I3
    return A


def baseline_noise_covariance(noise, sample_dt=None):
    """Per-sample SDs, scaled to spectral densities when ``sample_dt`` is given."""
    scale = 1.0 if sample_dt is None else sample_dt
    return np.diag(
        np.repeat(
            np.array([noise.sd_gyro**2, noise.sd_accel**2, 0.0, noise.sd_contact**2]) * scale, 3
        )
    )


def baseline_process_noise_cov(X, noise, sample_dt=None):
    # contact slip noise is a body-frame velocity, hence the R in the adjoint
    Ad = baseline_adjoint(X)
    return Ad @ baseline_noise_covariance(noise, sample_dt) @ T(Ad)


def baseline_predict(state, cov, u, dt, noise, world):
    """Propagate ``(state, cov)`` through one IMU interval; ``d`` is static."""
    R, v, p = integrate_imu(state.R, state.v, state.p, u, dt, world.g)
    sd = np.sqrt(np.diag(baseline_noise_covariance(noise, sample_dt=dt)))
    keep = sd > 0
    L = baseline_adjoint(state)[..., keep] * sd[keep]
    cov = propagate_covariance_factored(cov, baseline_error_jacobian(world), L, dt)
    return BaselineState(R, v, p, state.d), cov


BASELINE_H = np.hstack([np.zeros((3, 6)), _I3, -_I3])


def baseline_update(state, cov, d_m, noise, cond_max=COND_MAX, active=None):
    """Right-invariant contact-position update.

    The innovation ``d - p - R d_m`` is a function of the invariant error
    alone, so ``H`` is constant.  An ill-conditioned innovation covariance
    returns the inputs themselves (callers may test identity); for batched
    inputs the affected members keep their prior, as do members where the
    batch-shaped mask ``active`` is false.
    """
    new_state, new_cov, _ = _update(state, cov, d_m, noise, cond_max, active)
    return new_state, new_cov


def _update(state, cov, d_m, noise, cond_max, active):
    # also returns the members whose innovation covariance was accepted
    d_m = np.asarray(d_m, dtype=float)
    N = noise.sd_kin_meas**2 * (state.R @ T(state.R))
    K, _, ok = _gain(cov, BASELINE_H, N, cond_max)
    if np.ndim(ok) == 0 and not ok:
        return state, cov, ok
    innovation = state.d - state.p - mv(state.R, d_m)
    new_state = baseline_compose(baseline_exp(mv(K, innovation)), state)
    new_cov = joseph_update(cov, K, BASELINE_H, N)
    apply = ok if active is None else ok & np.asarray(active, dtype=bool)
    if not np.all(apply):
        new_state = select(apply, new_state, state)
        new_cov = np.where(apply[..., None, None], new_cov, cov)
    return new_state, new_cov, ok


def baseline_initial_covariance(X, sd_rot, sd_vel, sd_pos, sd_contact):
    """Invariant-error covariance when ``d`` was seeded from the first contact.

    Seeding ``d = p + R d_m`` makes the contact error equal the position error
    plus the contact measurement noise ``sd_contact``.
    """
    M = np.broadcast_to(np.eye(9), X.batch_shape + (9, 9)).copy()
    M[..., VEL, ROT] = skew(X.v)
    M[..., POS, ROT] = skew(X.p)
    nav = M @ np.diag(np.repeat(np.square([sd_rot, sd_vel, sd_pos]), 3)) @ T(M)
    P = np.zeros(X.batch_shape + (BASELINE_DIM, BASELINE_DIM))
    P[..., :9, :9] = nav
    P[..., CONTACT, :9] = nav[..., POS, :]
    P[..., :9, CONTACT] = nav[..., :, POS]
    P[..., CONTACT, CONTACT] = nav[..., POS, POS] + sd_contact**2 * _I3
    return P


__all__ = [
    "BaselineState",
    "NoiseSpec",
    "baseline_exp",
    "baseline_compose",
    "baseline_adjoint",
    "baseline_error_jacobian",
    "baseline_process_noise_cov",
    "baseline_predict",
    "baseline_update",
    "baseline_initial_covariance",
]

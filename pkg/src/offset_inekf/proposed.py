"""Invariant EKF that estimates IMU placement offsets from leg odometry.

The state lives on the group of :mod:`offset_inekf.lie`.  Propagation is
driven by the IMU and is group affine, so the right-invariant error
``eta = X_hat X^-1`` follows a linear, state-independent law.  The update
uses the contact-point velocity seen from the measurement frame,

    y = -d_m_dot = dR R^T v - (dp)x dR w - (d_m)x dR w,

which is not of invariant-observation form; it is linearised at the
current estimate.
"""

from __future__ import annotations

import math

import numpy as np

from .data import FilterBelief, ImuSample, NoiseSpec, WorldConstants
from .lie import (
    DIM,
    MATRIX_DIM,
    OFF_POS,
    OFF_ROT,
    POS,
    ROT,
    VEL,
    GroupState,
    adjoint,
    T,
    compose,
    cross,
    group_exp,
    mv,
    select,
    skew,
    so3_exp_jacobians,
    unskew,
)

COND_MAX = 1e12
OFFSETS = slice(9, 15)

_I3 = np.eye(3)

# Gauss-Legendre nodes/weights on [0, 1]; exact for the quartic integrand of
# the discrete process noise because A is nilpotent of order 3.
_GL_NODES = 0.5 + 0.5 * np.array([-np.sqrt(3.0 / 5.0), 0.0, np.sqrt(3.0 / 5.0)])
_GL_WEIGHTS = np.array([5.0, 8.0, 5.0]) / 18.0


def integrate_imu(R, v, p, u, dt, g):
    """Exact strapdown step for body rate and specific force held over ``dt``.

    ``R``, ``v``, ``p`` and the readings in ``u`` may carry leading batch axes.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt!r}")
    a = np.asarray(u.a_tilde, dtype=float)
    E, G1, G2 = so3_exp_jacobians(np.asarray(u.omega_tilde, dtype=float) * dt)
    inc = R @ np.stack((mv(G1, a) * dt, mv(G2, a) * dt**2), axis=-1)
    return (
        R @ E,
        v + inc[..., 0] + g * dt,
        p + v * dt + inc[..., 1] + 0.5 * g * dt**2,
    )


def propagate_state(X, u, dt, world):
    """Integrate the deterministic IMU dynamics over ``dt``.

    The body rate and specific force are held constant over the step and the
    kinematics are integrated exactly; the offsets have no deterministic
    motion.
    """
    R, v, p = integrate_imu(X.R, X.v, X.p, u, dt, world.g)
    return GroupState(R, v, p, X.dR, X.dp)


def dynamics_matrix(X, u, world):
    """Deterministic vector field ``f_u(X)`` on the dense 9x9 embedding."""
    F = np.zeros((MATRIX_DIM, MATRIX_DIM))
    F[0:3, 0:3] = X.R @ skew(u.omega_tilde)
    F[0:3, 3] = X.R @ np.asarray(u.a_tilde, dtype=float) + world.g
    F[0:3, 4] = X.v
    return F


def error_dynamics_matrix(eta, u, world):
    """Autonomous invariant-error field ``g_u(eta) = f_u(eta) - eta f_u(I)``."""
    return dynamics_matrix(eta, u, world) - eta.as_matrix() @ dynamics_matrix(
        GroupState.identity(), u, world
    )


def group_affine_residual(X1, X2, u, world=None):
    """Frobenius norm of the group-affine defect of ``f_u`` at ``(X1, X2)``."""
    world = WorldConstants() if world is None else world
    M1 = X1.as_matrix()
    M2 = X2.as_matrix()
    lhs = dynamics_matrix(compose(X1, X2), u, world)
    rhs = (
        dynamics_matrix(X1, u, world) @ M2
        + M1 @ dynamics_matrix(X2, u, world)
        - M1 @ dynamics_matrix(GroupState.identity(), u, world) @ M2
    )
    return float(np.linalg.norm(lhs - rhs))


def error_jacobian(world):
    """Constant Jacobian ``A`` of the log-linear invariant error dynamics."""
    A = np.zeros((DIM, DIM))
    A[VEL, ROT] = skew(world.g)
    A[POS, VEL] = _I3
    return A


def _noise_sd(noise, sample_dt):
    imu = 1.0 if sample_dt is None else math.sqrt(sample_dt)
    return np.repeat(
        [noise.sd_gyro * imu, noise.sd_accel * imu, 0.0, noise.sd_offset_R, noise.sd_offset_p], 3
    )


def noise_covariance(noise, sample_dt=None):
    """Diagonal covariance of the stacked process noise (gyro, accel, 0, offsets).

    ``sd_gyro`` and ``sd_accel`` are per-sample standard deviations.  Given
    ``sample_dt`` their variances are multiplied by it, which turns them into
    the spectral densities of equivalent continuous white noise; the offset
    intensities are already spectral densities and are used as they are.
    """
    imu_scale = 1.0 if sample_dt is None else sample_dt
    return np.diag(
        np.repeat(
            [
                noise.sd_gyro**2 * imu_scale,
                noise.sd_accel**2 * imu_scale,
                0.0,
                noise.sd_offset_R**2,
                noise.sd_offset_p**2,
            ],
            3,
        )
    )


def process_noise_cov(X, noise, sample_dt=None):
    """Process noise mapped into the right-invariant error, ``Ad Cov Ad^T``."""
    Ad = adjoint(X)
    return Ad @ noise_covariance(noise, sample_dt) @ T(Ad)


def transition_matrix(A, dt):
    """``expm(A dt)`` for the nilpotent error Jacobian (``A^3 = 0``)."""
    Adt = A * dt
    return np.eye(A.shape[0]) + Adt + 0.5 * (Adt @ Adt)


_QUAD_CACHE = {}


def _transition_and_nodes(A, dt):
    """``Phi(dt)`` and the weighted ``sqrt(w dt) Phi(s dt)`` at the quadrature nodes."""
    key = (float(dt), A.shape[0], A.tobytes())
    hit = _QUAD_CACHE.get(key)
    if hit is None:
        nodes = np.stack(
            [np.sqrt(w * dt) * transition_matrix(A, s * dt) for s, w in zip(_GL_NODES, _GL_WEIGHTS)]
        )
        hit = (transition_matrix(A, dt), nodes)
        if len(_QUAD_CACHE) > 64:
            _QUAD_CACHE.clear()
        _QUAD_CACHE[key] = hit
    return hit


def propagate_covariance(P, A, Qbar, dt):
    """Discrete Riccati step: ``Phi P Phi^T + int_0^dt Phi(s) Qbar Phi(s)^T ds``.

    The noise integral is evaluated exactly by three-point Gauss-Legendre
    quadrature, which assumes ``A^3 = 0`` as holds for :func:`error_jacobian`.
    ``P`` and ``Qbar`` may carry leading batch axes.
    """
    Phi, B = _transition_and_nodes(A, dt)
    Qbar = np.asarray(Qbar, dtype=float)
    out = Phi @ P @ Phi.T + np.sum(B @ Qbar[..., None, :, :] @ T(B), axis=-3)
    return 0.5 * (out + T(out))


def propagate_covariance_factored(P, A, L, dt):
    """:func:`propagate_covariance` with ``Qbar = L L^T`` given by its factor."""
    Phi, B = _transition_and_nodes(A, dt)
    M = np.moveaxis(B @ L[..., None, :, :], -3, -2)
    M = M.reshape(M.shape[:-2] + (-1,))
    out = Phi @ P @ Phi.T + M @ T(M)
    return 0.5 * (out + T(out))


def process_noise_factor(X, noise, sample_dt=None):
    """Factor ``L`` with ``L L^T == process_noise_cov(X, noise, sample_dt)``."""
    sd = _noise_sd(noise, sample_dt)
    keep = sd > 0
    return adjoint(X)[..., keep] * sd[keep]


def predict_measurement(X, omega_tilde, d_m):
    """Contact velocity predicted by the state, in the measurement frame."""
    w = mv(X.dR, np.asarray(omega_tilde, dtype=float))
    return mv(X.dR @ T(X.R), X.v) - cross(X.dp + np.asarray(d_m, dtype=float), w)


def measurement_jacobian(X, omega_tilde, d_m):
    """3x15 Jacobian of :func:`predict_measurement` w.r.t. the invariant error."""
    w = mv(X.dR, np.asarray(omega_tilde, dtype=float))
    W = skew(w)
    M = X.dR @ T(X.R)
    H = np.zeros(X.batch_shape + (3, DIM))
    H[..., VEL] = M
    # skew(dp) W - W skew(dp) == skew(dp x w)
    H[..., OFF_ROT] = skew(cross(X.dp, w) - mv(M, X.v)) + skew(d_m) @ W
    H[..., OFF_POS] = W
    return H


def measurement_noise_cov(X, noise):
    M = X.R @ T(X.dR)
    return noise.sd_kin_meas**2 * (M @ T(M))


def _innovation_inverse(S, cond_max):
    """``(S^-1, ok)`` for symmetric PSD ``S`` with leading batch axes.

    ``ok`` is false where ``S`` is singular, non-finite or has a condition
    number above ``cond_max``; there ``S^-1`` is set to zero.
    """
    try:
        S_inv = np.linalg.inv(S)
    except np.linalg.LinAlgError:
        S_inv = np.full_like(S, np.nan)
        flat_S, flat_inv = S.reshape(-1, *S.shape[-2:]), S_inv.reshape(-1, *S.shape[-2:])
        for i in range(flat_S.shape[0]):
            try:
                flat_inv[i] = np.linalg.inv(flat_S[i])
            except np.linalg.LinAlgError:
                pass
    ok = np.all(np.isfinite(S_inv), axis=(-2, -1))
    # Frobenius norms bound the 2-norm condition number from above
    with np.errstate(invalid="ignore", over="ignore"):
        bound = np.sqrt(np.sum(S * S, axis=(-2, -1)) * np.sum(S_inv * S_inv, axis=(-2, -1)))
    suspect = ok & ~(bound <= cond_max)
    if np.any(suspect):
        eig = np.linalg.eigvalsh(S[suspect])
        good = (eig[:, 0] > 0) & (eig[:, -1] <= cond_max * eig[:, 0])
        ok = ok.copy() if np.ndim(ok) else np.asarray(ok)
        ok[suspect] = good
    if not np.all(ok):
        S_inv = np.where(ok[..., None, None], S_inv, 0.0)
    return S_inv, ok


def _gain(P, H, N, cond_max):
    PHt = P @ T(H)
    S = H @ PHt + N
    S = 0.5 * (S + T(S))
    S_inv, ok = _innovation_inverse(S, cond_max)
    return PHt @ S_inv, S_inv, ok


def kalman_gain(P, H, N, cond_max=COND_MAX):
    """Gain ``P H^T S^-1``, or ``None`` when any ``S`` is not safely invertible."""
    K, _, ok = _gain(P, H, N, cond_max)
    return K if np.all(ok) else None


def joseph_update(P, K, H, N):
    IKH = np.eye(P.shape[-1]) - K @ H
    out = IKH @ P @ T(IKH) + K @ N @ T(K)
    return 0.5 * (out + T(out))


def rate_noise_bias(X, S_inv, d_m):
    """``E[dH^T S^-1 L u] / sigma^2`` for isotropic noise ``u`` on ``dR w``.

    Noise in the body rate enters both ``h`` (through ``L = (dp + d_m)x``) and
    ``H``; their correlation gives the correction ``K r`` a nonzero mean of
    ``sigma^2 P`` times this vector.
    """
    L = skew(X.dp + np.asarray(d_m, dtype=float))
    C = S_inv @ L
    LC = L @ C
    u = unskew(C - T(C))
    b = np.zeros(X.batch_shape + (DIM,))
    b[..., OFF_ROT] = unskew(LC - T(LC)) - cross(X.dp, u)
    b[..., OFF_POS] = -u
    return b


def update(
    belief, y, omega_tilde, d_m, noise, cond_max=COND_MAX, rate_var=0.0, active=None,
    offset_update=None,
):  # fmt: skip
    """Correct ``belief`` with one contact-velocity measurement ``y``.

    The correction is applied on the left, ``X+ = exp(K (y - h(X))) X``.  If
    the innovation covariance is singular or worse conditioned than
    ``cond_max`` the prior is kept and ``rejected`` is set.

    ``rate_var`` is the per-axis variance of the noise on ``omega_tilde``.
    When positive, the mean correction that this noise induces through the
    rate dependence of both ``h`` and ``H`` is removed.

    ``offset_update`` (batch-shaped booleans) marks where the offsets may be
    corrected.  Elsewhere the offset rows of the gain are zeroed, a Schmidt
    (consider) update: the offsets keep their value while the Joseph form,
    valid for any gain, keeps the covariance consistent.

    For a batched belief ``active`` (batch-shaped booleans) limits the update
    to some members; ``rejected`` is then batch-shaped as well.
    """
    X, P = belief.X, belief.P
    H = measurement_jacobian(X, omega_tilde, d_m)
    N = measurement_noise_cov(X, noise)
    K, S_inv, ok = _gain(P, H, N, cond_max)
    if np.ndim(ok) == 0 and not ok:
        return FilterBelief(X, P, rejected=True)
    innovation = np.asarray(y, dtype=float) - predict_measurement(X, omega_tilde, d_m)
    keep = None
    if offset_update is not None and not np.all(offset_update):
        keep = np.ones(np.shape(offset_update) + (DIM,))
        keep[..., OFFSETS] = np.asarray(offset_update, dtype=float)[..., None]
        K = K * keep[..., None]
    correction = mv(K, innovation)
    if rate_var > 0:
        bias = mv(P, rate_noise_bias(X, S_inv, d_m))
        correction -= rate_var * (bias if keep is None else bias * keep)
    X_new = compose(group_exp(correction), X)
    P_new = joseph_update(P, K, H, N)
    if np.ndim(ok) == 0 and active is None:
        return FilterBelief(X_new, P_new)
    apply = ok if active is None else ok & np.asarray(active, dtype=bool)
    if not np.all(apply):
        X_new = select(apply, X_new, X)
        P_new = np.where(apply[..., None, None], P_new, P)
    rejected = ~ok if active is None else ~ok & np.asarray(active, dtype=bool)
    return FilterBelief(X_new, P_new, rejected=rejected)


def predict(belief, u, dt, noise, world):
    """Propagate ``belief`` through one IMU interval of length ``dt``."""
    A = error_jacobian(world)
    L = process_noise_factor(belief.X, noise, sample_dt=dt)
    return FilterBelief(
        propagate_state(belief.X, u, dt, world),
        propagate_covariance_factored(belief.P, A, L, dt),
    )


def step(belief, imu, odo, dt, noise, world, omega_meas=None):
    """Propagate with ``imu`` over ``dt`` then update with ``odo`` if given.

    ``odo`` is taken at the end of the interval.  ``omega_meas`` is the body
    rate used inside the measurement model; it defaults to the IMU reading.
    """
    if dt > 0:
        belief = predict(belief, imu, dt, noise, world)
    if odo is None:
        return belief
    w = imu.omega_tilde if omega_meas is None else omega_meas
    return update(belief, odo.y, w, odo.d_m, noise)


def initial_covariance(X, sd_rot, sd_vel, sd_pos, sd_off_rot, sd_off_pos):
    """Covariance of the invariant error for independent physical errors.

    The standard deviations describe world-frame errors of orientation,
    velocity and position, and errors of the offsets; they are mapped into
    right-invariant coordinates, where rotation errors leak into the
    translational components through the current estimate.
    """
    M = np.broadcast_to(np.eye(DIM), X.batch_shape + (DIM, DIM)).copy()
    M[..., VEL, ROT] = skew(X.v)
    M[..., POS, ROT] = skew(X.p)
    M[..., OFF_POS, OFF_ROT] = skew(X.dp)
    D = np.diag(np.repeat(np.square([sd_rot, sd_vel, sd_pos, sd_off_rot, sd_off_pos]), 3))
    return M @ D @ T(M)


__all__ = [
    "ImuSample",
    "NoiseSpec",
    "WorldConstants",
    "FilterBelief",
    "integrate_imu",
    "propagate_state",
    "dynamics_matrix",
    "error_dynamics_matrix",
    "group_affine_residual",
    "error_jacobian",
    "noise_covariance",
    "process_noise_cov",
    "transition_matrix",
    "propagate_covariance",
    "propagate_covariance_factored",
    "process_noise_factor",
    "rate_noise_bias",
    "predict_measurement",
    "measurement_jacobian",
    "measurement_noise_cov",
    "kalman_gain",
    "update",
    "predict",
    "step",
    "initial_covariance",
]

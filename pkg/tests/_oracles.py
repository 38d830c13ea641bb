"""Independent reference computations and random draws shared by the tests."""

import numpy as np
from scipy.linalg import expm

from offset_inekf.data import ImuSample
from offset_inekf.lie import GroupState


def random_rotvec(rng, max_angle=np.pi - 0.01, min_angle=0.0):
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return rng.uniform(min_angle, max_angle) * axis


def skew_oracle(v):
    """Skew matrix written out entry by entry."""
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def rotation_oracle(phi):
    """Rotation from a generic scaling-and-squaring matrix exponential."""
    return expm(skew_oracle(phi))


def random_rotation(rng, max_angle=np.pi - 0.01):
    return rotation_oracle(random_rotvec(rng, max_angle))


def random_state(rng, scale=1.0):
    return GroupState(
        random_rotation(rng),
        scale * rng.standard_normal(3),
        scale * rng.standard_normal(3),
        random_rotation(rng),
        scale * rng.standard_normal(3),
    )


def random_imu(rng, rate=1.0, accel=5.0):
    return ImuSample(0.0, accel * rng.standard_normal(3), rate * rng.standard_normal(3))


def embedding(X):
    """Dense 9x9 embedding assembled independently of ``GroupState.as_matrix``."""
    M = np.eye(9)
    M[0:3, 0:3] = X.R
    M[0:3, 3] = X.v
    M[0:3, 4] = X.p
    M[5:8, 5:8] = X.dR
    M[5:8, 8] = X.dp
    return M


def wedge_oracle(z):
    M = np.zeros((9, 9))
    M[0:3, 0:3] = skew_oracle(z[0:3])
    M[0:3, 3] = z[3:6]
    M[0:3, 4] = z[6:9]
    M[5:8, 5:8] = skew_oracle(z[9:12])
    M[5:8, 8] = z[12:15]
    return M


def vee_oracle(M):
    return np.concatenate(
        [
            [M[2, 1], M[0, 2], M[1, 0]],
            M[0:3, 3],
            M[0:3, 4],
            [M[7, 6], M[5, 7], M[6, 5]],
            M[5:8, 8],
        ]
    )


def _strapdown_rate(R, v, a, w, g):
    return R @ skew_oracle(w), R @ a + g, v


def substep_strapdown(R, v, p, a, w, g, dt, n=1000):
    """RK4 integration of ``R' = R [w]x, v' = R a + g, p' = v`` in ``n`` substeps."""
    h = dt / n
    for _ in range(n):
        k1 = _strapdown_rate(R, v, a, w, g)
        k2 = _strapdown_rate(R + 0.5 * h * k1[0], v + 0.5 * h * k1[1], a, w, g)
        k3 = _strapdown_rate(R + 0.5 * h * k2[0], v + 0.5 * h * k2[1], a, w, g)
        k4 = _strapdown_rate(R + h * k3[0], v + h * k3[1], a, w, g)
        R = R + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        v_new = v + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        p = p + h / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        v = v_new
    return R, v, p


def substep_riccati(P, A, Q, dt, n=1000):
    """RK4 integration of ``P' = A P + P A^T + Q`` in ``n`` substeps."""
    h = dt / n

    def rate(P):
        return A @ P + P @ A.T + Q

    for _ in range(n):
        k1 = rate(P)
        k2 = rate(P + 0.5 * h * k1)
        k3 = rate(P + 0.5 * h * k2)
        k4 = rate(P + h * k3)
        P = P + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return P


def central_jacobian(f, x0, h):
    """Central-difference Jacobian of ``f`` at ``x0``."""
    x0 = np.asarray(x0, dtype=float)
    cols = []
    for i in range(x0.size):
        e = np.zeros_like(x0)
        e[i] = h
        cols.append((np.asarray(f(x0 + e)) - np.asarray(f(x0 - e))) / (2 * h))
    return np.stack(cols, axis=-1)

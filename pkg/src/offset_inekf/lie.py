"""Matrix Lie group machinery for the offset-augmented navigation group.

An element of the group stacks an extended pose ``(R, v, p)`` (rotation,
velocity and position of the IMU in the world frame) next to a pose offset
``(dR, dp)`` (rotation and translation of the IMU expressed in the
measurement frame).  Its dense embedding is the 9x9 block matrix::

    [ R   v  p  0   0  ]
    [ 0   1  0  0   0  ]
    [ 0   0  1  0   0  ]
    [ 0   0  0  dR  dp ]
    [ 0   0  0  0   1  ]

Tangent vectors are 15-vectors ordered ``(rot, vel, pos, offset_rot,
offset_pos)``.  The two diagonal blocks never interact, so every operation
below is evaluated blockwise with closed forms; the dense embedding exists
for cross-checking against generic matrix algebra.

Except for the logarithms, every function accepts leading batch axes, so a
stack of independent filters can be advanced with one call per operation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DIM = 15
MATRIX_DIM = 9

ROT = slice(0, 3)
VEL = slice(3, 6)
POS = slice(6, 9)
OFF_ROT = slice(9, 12)
OFF_POS = slice(12, 15)

_SMALL_ANGLE = 1e-8
_SERIES_ANGLE = 0.1
_LOG_MAX_ANGLE = np.pi - 1e-6
_ORTHO_TOL = 1e-6

_I3 = np.eye(3)


def mv(A, x):
    """Batched matrix-vector product ``A @ x`` over leading axes."""
    return (A @ x[..., None])[..., 0]


def T(A):
    """Swap the last two axes (batched transpose)."""
    return np.swapaxes(A, -1, -2)


# skew(v).reshape(9) == v @ _SKEW_BASIS; entries are exact (one signed term each)
_SKEW_BASIS = np.array(
    [
        [0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0],
        [0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    ]
)
_NEXT = [1, 2, 0]
_PREV = [2, 0, 1]


def cross(a, b):
    """Cross product over the last axis, cheaper than ``np.cross`` for small arrays."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return a[..., _NEXT] * b[..., _PREV] - a[..., _PREV] * b[..., _NEXT]


def skew(v):
    """Return the skew-symmetric matrix ``S`` with ``S @ b == cross(v, b)``.

    ``v`` may carry leading batch axes, shape ``(..., 3) -> (..., 3, 3)``.
    """
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        x, y, z = v.tolist()
        return np.array((0.0, -z, y, z, 0.0, -x, -y, x, 0.0)).reshape(3, 3)
    return (v @ _SKEW_BASIS).reshape(v.shape[:-1] + (3, 3))


def unskew(S):
    """Inverse of :func:`skew` (reads the off-diagonal entries)."""
    S = np.asarray(S)
    return S.reshape(S.shape[:-2] + (9,))[..., [7, 2, 3]]


def _norm(phi):
    return np.sqrt(np.sum(phi * phi, axis=-1))


def _exp_coefficients(theta):
    # sin(t)/t and (1 - cos t)/t^2, by series below _SMALL_ANGLE; a single
    # angle (of any shape) gives plain floats, which _series broadcasts
    if np.size(theta) == 1 and math.isfinite(theta := float(np.reshape(theta, ()))):
        if theta < _SMALL_ANGLE:
            return 1.0, 0.5
        return math.sin(theta) / theta, (1.0 - math.cos(theta)) / theta**2
    small = theta < _SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(t) / t)
    b = np.where(small, 0.5, (1.0 - np.cos(t)) / (t * t))
    return a, b


def _jacobian_coefficients(theta):
    # coefficients of K and K^2 in Gamma_1 (a1, b1) and Gamma_2 (a2, b2)
    if np.size(theta) == 1 and math.isfinite(theta := float(np.reshape(theta, ()))):
        if theta < _SERIES_ANGLE:
            return _series_coefficients(theta)
        s, c = math.sin(theta), math.cos(theta)
        return _closed_coefficients(theta, s, c)
    small = theta < _SERIES_ANGLE
    t = np.where(small, 1.0, theta)
    closed = _closed_coefficients(t, np.sin(t), np.cos(t))
    series = _series_coefficients(np.where(small, theta, 0.0))
    return tuple(np.where(small, s_, c_) for s_, c_ in zip(series, closed))


def _series_coefficients(theta):
    t2 = theta * theta
    t4 = t2 * t2
    a1 = 0.5 - t2 / 24.0 + t4 / 720.0 - t4 * t2 / 40320.0
    b1 = 1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0 - t4 * t2 / 362880.0
    b2 = 1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0 - t4 * t2 / 3628800.0
    return a1, b1, b1, b2


def _closed_coefficients(theta, s, c):
    t2 = theta * theta
    a1 = (1.0 - c) / t2
    b1 = (theta - s) / (t2 * theta)
    b2 = (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2)
    return a1, b1, b1, b2


def _series(c0, c1, c2, K, K2):
    # c0 I + c1 K + c2 K^2 with scalar or batched coefficients
    c1 = np.asarray(c1)[..., None, None]
    c2 = np.asarray(c2)[..., None, None]
    return c0 * _I3 + c1 * K + c2 * K2


def so3_exp(phi):
    """Rotation matrix ``exp(skew(phi))`` via the Rodrigues formula.

    Below an angle of 1e-8 the second-order series ``I + K + K^2/2`` is used.
    Leading axes of ``phi`` are batch axes.
    """
    phi = np.asarray(phi, dtype=float)
    K = skew(phi)
    a, b = _exp_coefficients(_norm(phi))
    return _series(1.0, a, b, K, K @ K)


def so3_exp_and_jacobian(phi):
    """Return ``(so3_exp(phi), so3_left_jacobian(phi))`` sharing one skew."""
    phi = np.asarray(phi, dtype=float)
    theta = _norm(phi)
    K = skew(phi)
    K2 = K @ K
    a, b = _exp_coefficients(theta)
    a1, b1, _, _ = _jacobian_coefficients(theta)
    return _series(1.0, a, b, K, K2), _series(1.0, a1, b1, K, K2)


def so3_left_jacobian(phi):
    """Left Jacobian of SO(3), ``sum_n K^n / (n+1)!``."""
    phi = np.asarray(phi, dtype=float)
    a1, b1, _, _ = _jacobian_coefficients(_norm(phi))
    K = skew(phi)
    return _series(1.0, a1, b1, K, K @ K)


def so3_left_jacobian_inv(phi):
    """Inverse of :func:`so3_left_jacobian` (angles below pi)."""
    phi = np.asarray(phi, dtype=float)
    theta = np.asarray(_norm(phi))
    small = theta < _SERIES_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    series = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0 + t2**3 / 1209600.0
    with np.errstate(divide="ignore", invalid="ignore"):
        closed = 1.0 / t**2 - (1.0 + np.cos(t)) / (2.0 * t * np.sin(t))
    K = skew(phi)
    return _series(1.0, -0.5, np.where(small, series, closed), K, K @ K)


def so3_gamma2(phi):
    """Second integrated rotation series ``sum_n K^n / (n+2)!``.

    Together with the left Jacobian this gives the exact position increment
    of a body accelerating at a constant body-frame rate over one step.
    """
    phi = np.asarray(phi, dtype=float)
    _, _, a2, b2 = _jacobian_coefficients(_norm(phi))
    K = skew(phi)
    return _series(0.5, a2, b2, K, K @ K)


def so3_exp_jacobians(phi):
    """Return ``(so3_exp(phi), Gamma_1(phi), Gamma_2(phi))`` sharing one skew."""
    phi = np.asarray(phi, dtype=float)
    theta = _norm(phi)
    K = skew(phi)
    K2 = K @ K
    a, b = _exp_coefficients(theta)
    a1, b1, a2, b2 = _jacobian_coefficients(theta)
    return _series(1.0, a, b, K, K2), _series(1.0, a1, b1, K, K2), _series(0.5, a2, b2, K, K2)


def is_rotation(R, tol=1e-9):
    """True if ``R`` (or every matrix of a batch) is a finite proper rotation."""
    R = np.asarray(R, dtype=float)
    if R.shape[-2:] != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(
        np.max(np.abs(T(R) @ R - _I3)) <= tol
        and np.max(np.abs(np.linalg.det(R) - 1.0)) <= tol
    )


def so3_log(R):
    """Rotation vector of a single rotation matrix ``R``.

    Raises
    ------
    ValueError
        If ``R`` is not orthonormal with unit determinant, or if its angle is
        within 1e-6 of pi, where the axis sign is ambiguous.
    """
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not is_rotation(R, _ORTHO_TOL):
        raise ValueError("so3_log expects a proper 3x3 rotation matrix")
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = np.sqrt(w @ w)
    c = 0.5 * (np.trace(R) - 1.0)
    theta = np.arctan2(s, c)
    if theta >= _LOG_MAX_ANGLE:
        raise ValueError(f"rotation angle {theta:.9f} too close to pi for a unique log")
    if theta < _SMALL_ANGLE:
        return w
    return (theta / s) * w


def project_to_so3(R):
    """Nearest rotation in the Frobenius sense (polar decomposition)."""
    U, _, Vt = np.linalg.svd(R)
    flip = np.linalg.det(U @ Vt) < 0
    if np.any(flip):
        U = U.copy()
        U[..., :, -1] = np.where(flip[..., None], -U[..., :, -1], U[..., :, -1])
    return U @ Vt


@dataclass(frozen=True, eq=False)
class GroupState:
    """Element of the navigation group with IMU placement offsets.

    All parts may share leading batch axes, in which case the state stands
    for a stack of independent group elements and every group operation
    below acts elementwise.

    Attributes
    ----------
    R : (..., 3, 3) ndarray
        IMU orientation, world <- IMU.
    v, p : (..., 3) ndarray
        IMU velocity [m/s] and position [m] in the world frame.
    dR : (..., 3, 3) ndarray
        Rotation offset, measurement <- IMU.
    dp : (..., 3) ndarray
        Position offset [m] expressed in the measurement frame.
    """

    R: np.ndarray
    v: np.ndarray
    p: np.ndarray
    dR: np.ndarray
    dp: np.ndarray

    @classmethod
    def identity(cls, batch_shape=()):
        I = np.broadcast_to(_I3, tuple(batch_shape) + (3, 3)).copy()
        z = np.zeros(tuple(batch_shape) + (3,))
        return cls(I, z, z.copy(), I.copy(), z.copy())

    @classmethod
    def from_parts(cls, R=None, v=None, p=None, dR=None, dp=None):
        """Build a single state from array-likes, defaulting each part to identity."""

        def vec(x):
            return np.zeros(3) if x is None else np.array(x, dtype=float).reshape(3)

        def rot(x):
            out = _I3.copy() if x is None else np.array(x, dtype=float).reshape(3, 3)
            if not is_rotation(out, _ORTHO_TOL):
                raise ValueError("rotation block is not a proper rotation")
            return out

        return cls(rot(R), vec(v), vec(p), rot(dR), vec(dp))

    @classmethod
    def stack(cls, states):
        """Batch a sequence of states along a new leading axis."""
        states = list(states)
        if not states:
            raise ValueError("cannot stack an empty sequence of states")
        return cls(*(np.stack([getattr(s, k) for s in states]) for k in _PARTS))

    @property
    def batch_shape(self):
        return self.v.shape[:-1]

    def __getitem__(self, index):
        """Select along the batch axes."""
        return type(self)(*(getattr(self, k)[index] for k in _PARTS))

    def as_matrix(self):
        M = np.zeros(self.batch_shape + (MATRIX_DIM, MATRIX_DIM))
        M[..., 0:3, 0:3] = self.R
        M[..., 0:3, 3] = self.v
        M[..., 0:3, 4] = self.p
        M[..., 3, 3] = 1.0
        M[..., 4, 4] = 1.0
        M[..., 5:8, 5:8] = self.dR
        M[..., 5:8, 8] = self.dp
        M[..., 8, 8] = 1.0
        return M

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float)
        return cls(
            M[..., 0:3, 0:3].copy(),
            M[..., 0:3, 3].copy(),
            M[..., 0:3, 4].copy(),
            M[..., 5:8, 5:8].copy(),
            M[..., 5:8, 8].copy(),
        )

    def is_valid(self, tol=1e-9):
        return (
            all(np.all(np.isfinite(getattr(self, k))) for k in _PARTS)
            and is_rotation(self.R, tol)
            and is_rotation(self.dR, tol)
        )

    def __repr__(self):
        return (
            f"GroupState(R={self.R.tolist()}, v={self.v.tolist()}, "
            f"p={self.p.tolist()}, dR={self.dR.tolist()}, dp={self.dp.tolist()})"
        )


_PARTS = ("R", "v", "p", "dR", "dp")


def select(mask, new, old):
    """Elementwise choice between two batched states of the same dataclass.

    ``mask`` has the batch shape; where it is true the part comes from
    ``new``.  Parts are matched by dataclass field, so this also serves other
    state types with ``(..., 3)`` and ``(..., 3, 3)`` fields.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.all():
        return new
    if not mask.any():
        return old
    parts = {}
    for name in new.__dataclass_fields__:
        a, b = getattr(new, name), getattr(old, name)
        m = mask.reshape(mask.shape + (1,) * (a.ndim - mask.ndim))
        parts[name] = np.where(m, a, b)
    return type(new)(**parts)


def wedge(zeta):
    """Map a 15-vector (batched over leading axes) to its 9x9 Lie algebra matrix."""
    zeta = np.asarray(zeta, dtype=float)
    M = np.zeros(zeta.shape[:-1] + (MATRIX_DIM, MATRIX_DIM))
    M[..., 0:3, 0:3] = skew(zeta[..., ROT])
    M[..., 0:3, 3] = zeta[..., VEL]
    M[..., 0:3, 4] = zeta[..., POS]
    M[..., 5:8, 5:8] = skew(zeta[..., OFF_ROT])
    M[..., 5:8, 8] = zeta[..., OFF_POS]
    return M


def vee(M):
    """Inverse of :func:`wedge`; ignores entries outside the algebra pattern."""
    M = np.asarray(M, dtype=float)
    return np.concatenate(
        [
            unskew(M[..., 0:3, 0:3]),
            M[..., 0:3, 3],
            M[..., 0:3, 4],
            unskew(M[..., 5:8, 5:8]),
            M[..., 5:8, 8],
        ],
        axis=-1,
    )


def group_exp(zeta):
    """Group exponential, blockwise closed form of ``expm(wedge(zeta))``."""
    zeta = np.asarray(zeta, dtype=float)
    E, J = so3_exp_and_jacobian(zeta[..., ROT])
    Eo, Jo = so3_exp_and_jacobian(zeta[..., OFF_ROT])
    vp = J @ np.stack((zeta[..., VEL], zeta[..., POS]), axis=-1)
    return GroupState(E, vp[..., 0], vp[..., 1], Eo, mv(Jo, zeta[..., OFF_POS]))


def group_log(X):
    """Inverse of :func:`group_exp` for a single state with angles below pi."""
    phi = so3_log(X.R)
    psi = so3_log(X.dR)
    Ji = so3_left_jacobian_inv(phi)
    return np.concatenate([phi, Ji @ X.v, Ji @ X.p, psi, so3_left_jacobian_inv(psi) @ X.dp])


def compose(X1, X2):
    """Group product ``X1 X2``."""
    R1 = X1.R
    dR1 = X1.dR
    vp = R1 @ np.stack((X2.v, X2.p), axis=-1)
    return GroupState(
        R1 @ X2.R,
        vp[..., 0] + X1.v,
        vp[..., 1] + X1.p,
        dR1 @ X2.dR,
        mv(dR1, X2.dp) + X1.dp,
    )


def inverse(X):
    Rt = T(X.R)
    dRt = T(X.dR)
    return GroupState(Rt, -mv(Rt, X.v), -mv(Rt, X.p), dRt, -mv(dRt, X.dp))


def adjoint(X):
    """15x15 adjoint matrix, ``wedge(adjoint(X) @ z) == X wedge(z) X^-1``."""
    R = X.R
    dR = X.dR
    Ad = np.zeros(X.batch_shape + (DIM, DIM))
    Ad[..., ROT, ROT] = R
    Ad[..., VEL, VEL] = R
    Ad[..., POS, POS] = R
    Ad[..., VEL, ROT] = skew(X.v) @ R
    Ad[..., POS, ROT] = skew(X.p) @ R
    Ad[..., OFF_ROT, OFF_ROT] = dR
    Ad[..., OFF_POS, OFF_POS] = dR
    Ad[..., OFF_POS, OFF_ROT] = skew(X.dp) @ dR
    return Ad

"""Serial-chain forward kinematics for leg odometry.

Each joint is described by standard Denavit-Hartenberg parameters and is
revolute; the link transform is

    T_i = Rz(theta_i + theta_offset) Tz(d) Tx(a) Rx(alpha).

The chain runs from the measurement frame to the contact point, so
``fk`` returns the contact position ``d_m`` and ``jacobian(...) @ alpha_dot``
its velocity, both in the measurement frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LegOdometryMeasurement


@dataclass(frozen=True)
class DHJoint:
    """Revolute joint with DH link length ``a`` [m], twist ``alpha`` [rad],
    offset ``d`` [m] and joint-angle offset ``theta_offset`` [rad]."""

    a: float = 0.0
    alpha: float = 0.0
    d: float = 0.0
    theta_offset: float = 0.0

    def __post_init__(self):
        for name in ("a", "alpha", "d", "theta_offset"):
            value = float(getattr(self, name))
            if not np.isfinite(value):
                raise ValueError(f"DH parameter {name} must be finite")
            object.__setattr__(self, name, value)

    def transform(self, theta):
        """4x4 homogeneous transform of this link at joint angle ``theta``."""
        th = theta + self.theta_offset
        ct, st = np.cos(th), np.sin(th)
        ca, sa = np.cos(self.alpha), np.sin(self.alpha)
        return np.array(
            [
                [ct, -st * ca, st * sa, self.a * ct],
                [st, ct * ca, -ct * sa, self.a * st],
                [0.0, sa, ca, self.d],
                [0.0, 0.0, 0.0, 1.0],
            ]
        )


@dataclass(frozen=True)
class KinematicChain:
    joints: tuple

    def __post_init__(self):
        joints = tuple(j if isinstance(j, DHJoint) else DHJoint(*j) for j in self.joints)
        if not joints:
            raise ValueError("a kinematic chain needs at least one joint")
        object.__setattr__(self, "joints", joints)

    def __len__(self):
        return len(self.joints)

    @classmethod
    def from_dh_table(cls, rows):
        """Build a chain from rows ``(a, alpha, d, theta_offset)`` or mappings
        with those keys."""
        joints = []
        for row in rows:
            if isinstance(row, dict):
                joints.append(DHJoint(**row))
            else:
                joints.append(DHJoint(*row))
        return cls(tuple(joints))

    @property
    def reach(self):
        """Upper bound on ``|fk(alpha)|``."""
        return float(sum(abs(j.a) + abs(j.d) for j in self.joints))


@dataclass(frozen=True)
class JointState:
    alpha: np.ndarray
    alpha_dot: np.ndarray

    def __post_init__(self):
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        alpha_dot = np.atleast_1d(np.asarray(self.alpha_dot, dtype=float))
        if alpha.shape != alpha_dot.shape or alpha.ndim != 1:
            raise ValueError("alpha and alpha_dot must be 1-D of equal length")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_dot", alpha_dot)


def _check_angles(chain, alpha):
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    if alpha.shape != (len(chain),):
        raise ValueError(f"expected {len(chain)} joint angles, got shape {alpha.shape}")
    return alpha


def link_frames(chain, alpha):
    """Cumulative transforms ``T_0 = I, T_1, ..., T_n`` of each link frame."""
    alpha = _check_angles(chain, alpha)
    frames = [np.eye(4)]
    for joint, theta in zip(chain.joints, alpha):
        frames.append(frames[-1] @ joint.transform(theta))
    return frames


def fk(chain, alpha):
    """Contact point position in the measurement frame."""
    return link_frames(chain, alpha)[-1][:3, 3].copy()


def jacobian(chain, alpha):
    """Analytic 3xn position Jacobian ``d fk / d alpha``.

    Column ``i`` is ``z_{i} x (p_n - p_{i})`` where ``z_i``, ``p_i`` are the
    axis and origin of the frame preceding joint ``i + 1``.
    """
    frames = link_frames(chain, alpha)
    p_end = frames[-1][:3, 3]
    J = np.empty((3, len(chain)))
    for i, T in enumerate(frames[:-1]):
        J[:, i] = np.cross(T[:3, 2], p_end - T[:3, 3])
    return J


def contact_velocity(chain, state):
    """Velocity of the contact point in the measurement frame, ``J alpha_dot``."""
    alpha_dot = np.asarray(state.alpha_dot, dtype=float)
    if alpha_dot.shape != (len(chain),):
        raise ValueError(f"expected {len(chain)} joint rates, got shape {alpha_dot.shape}")
    return jacobian(chain, state.alpha) @ alpha_dot


def leg_odometry_from_joints(chain, t, state):
    """Leg-odometry measurement at time ``t`` from encoder readings."""
    return LegOdometryMeasurement(t, fk(chain, state.alpha), contact_velocity(chain, state))


__all__ = [
    "DHJoint",
    "KinematicChain",
    "JointState",
    "link_frames",
    "fk",
    "jacobian",
    "contact_velocity",
    "leg_odometry_from_joints",
]

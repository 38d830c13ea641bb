"""Invariant EKF for legged odometry with unknown IMU placement offsets."""

from .baseline import BaselineState
from .data import FilterBelief, ImuSample, LegOdometryMeasurement, NoiseSpec, WorldConstants
from .estimators import ContactInEKF, FilterDivergenceError, OffsetInEKF
from .kinematics import DHJoint, JointState, KinematicChain, fk, jacobian
from .lie import GroupState
from .simulator import (
    FrameOffsets,
    MotionProfile,
    generate_trajectory,
    synthesize_imu,
    synthesize_leg_odometry,
    to_sensor_array,
)

__version__ = "0.1.0"

"""Input validation for sensor streams."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

SENSOR_COLUMNS = (
    "t",
    "ax", "ay", "az",
    "gx", "gy", "gz",
    "dmx", "dmy", "dmz",
    "ddmx", "ddmy", "ddmz",
)  # fmt: skip
N_SENSOR_COLUMNS = len(SENSOR_COLUMNS)

TIME = 0
ACCEL = slice(1, 4)
GYRO = slice(4, 7)
CONTACT_POS = slice(7, 10)
CONTACT_VEL = slice(10, 13)


def check_sensor_array(X, *, min_samples=1):
    """Validate a sensor table and return it as a float ndarray.

    Rows follow :data:`SENSOR_COLUMNS`.  Time and IMU columns must be finite
    and timestamps strictly increasing.  A row without leg odometry carries
    NaN in all six contact columns; partially missing odometry is rejected.
    """
    X = check_array(
        X,
        dtype=np.float64,
        ensure_all_finite="allow-nan",
        ensure_min_samples=min_samples,
        copy=False,
    )
    if X.shape[1] != N_SENSOR_COLUMNS:
        raise ValueError(
            f"expected {N_SENSOR_COLUMNS} sensor columns {SENSOR_COLUMNS}, got {X.shape[1]}"
        )
    if not np.all(np.isfinite(X[:, :7])):
        bad = int(np.argmax(~np.all(np.isfinite(X[:, :7]), axis=1)))
        raise ValueError(f"non-finite time or IMU value at row {bad}")
    if X.shape[0] > 1 and not np.all(np.diff(X[:, TIME]) > 0):
        raise ValueError("timestamps must be strictly increasing")
    odo = X[:, 7:]
    present = np.isfinite(odo)
    partial = present.any(axis=1) & ~present.all(axis=1)
    if partial.any():
        raise ValueError(f"row {int(np.argmax(partial))} has partially missing odometry")
    return X


def check_sensor_stack(X, *, min_samples=1):
    """Validate one sensor table or a stack of tables with shared timestamps.

    Returns ``(stack, batched)`` where ``stack`` has shape ``(B, n, 13)`` and
    ``batched`` tells whether the input was already three-dimensional.
    """
    if isinstance(X, np.ndarray) and X.ndim == 3:
        if X.shape[0] < 1:
            raise ValueError("a sensor stack needs at least one table")
        stack = np.stack([check_sensor_array(x, min_samples=min_samples) for x in X])
        if not np.all(stack[:, :, TIME] == stack[:1, :, TIME]):
            raise ValueError("all tables of a sensor stack must share their timestamps")
        return stack, True
    return check_sensor_array(X, min_samples=min_samples)[None], False


def odometry_mask(X):
    """Rows of a validated sensor table (or stack) that carry leg odometry."""
    return np.isfinite(X[..., 7])


def check_rotation(R, name="rotation", tol=1e-6):
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise ValueError(f"{name} must be 3x3, got shape {R.shape}")
    if not np.allclose(R.T @ R, np.eye(3), atol=tol) or abs(np.linalg.det(R) - 1) > tol:
        raise ValueError(f"{name} is not a proper rotation")
    return R


def check_vector3(v, name="vector"):
    v = np.asarray(v, dtype=float)
    if v.shape != (3,) or not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be a finite 3-vector")
    return v

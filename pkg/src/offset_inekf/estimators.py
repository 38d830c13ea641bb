"""Estimator-style wrappers that run the filters over sensor tables.

Both filters follow the scikit-learn conventions: hyperparameters are plain
constructor arguments (so ``get_params``/``set_params``/``clone`` work and a
trial sweep can clone one configured template), ``fit`` runs the filter over
a whole stream, ``partial_fit`` continues from the last belief, and
``transform`` returns the estimated trajectory as a table.

A sensor table has the columns of
:data:`~offset_inekf.validation.SENSOR_COLUMNS`.  The IMU reading in row
``k`` drives the interval ``[t_k, t_{k+1})``; the odometry in row ``k`` is
taken at ``t_k``.  Each row is processed by propagating from the previous
row and then correcting with the row's odometry, so the recorded estimate
for row ``k`` is the posterior at ``t_k``.

``fit`` also accepts a stack of tables of shape ``(B, n, 13)`` that share
their timestamps.  The ``B`` filters then run side by side with batched
array operations, which is much cheaper per filter than ``B`` separate runs.
Fitted attributes gain a leading batch axis, and a member whose state turns
non-finite is recorded in ``divergence_step_`` instead of raising.
"""

from __future__ import annotations

import time

import numpy as np
from scipy.spatial.transform import Rotation
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .baseline import (
    BASELINE_DIM,
    BaselineState,
    _update as _baseline_update,
    baseline_initial_covariance,
    baseline_predict,
)
from .data import FilterBelief, ImuSample, NoiseSpec, WorldConstants
from .lie import DIM, GroupState, T, mv, project_to_so3, select
from .proposed import COND_MAX, initial_covariance, predict, update
from .validation import check_sensor_stack, odometry_mask

_I3 = np.eye(3)
_ORTHO_DRIFT = 1e-8
# rotations are products of exact exponentials; their drift grows by ~1e-16
# per step, so checking it every few steps is enough to stay below 1e-8
_DRIFT_CHECK_EVERY = 10
_SHARED_KEYS = ("times", "step_seconds")


class FilterDivergenceError(FloatingPointError):
    """Raised when a filter state becomes non-finite."""

    def __init__(self, step, t):
        super().__init__(f"non-finite filter state at step {step} (t={t:.6f} s)")
        self.step = step
        self.t = t


def centered_rates(gyro, halfwidth):
    """Mean of the interval rates ``gyro[k - m : k + m]`` for each row ``k``.

    Reading ``j`` covers ``[t_j, t_{j+1})``, so this window is centred on
    ``t_k``.  Windows are truncated at the ends of the table.  Time runs
    along the first axis; further axes are carried along.
    """
    gyro = np.asarray(gyro, dtype=float)
    n = gyro.shape[0]
    csum = np.concatenate([np.zeros((1,) + gyro.shape[1:]), np.cumsum(gyro, axis=0)])
    k = np.arange(n)
    lo = np.clip(k - halfwidth, 0, n)
    hi = np.clip(k + halfwidth, 1, n)
    hi = np.maximum(hi, lo + 1)
    count = (hi - lo).reshape((n,) + (1,) * (gyro.ndim - 1))
    return (csum[hi] - csum[lo]) / count


def _orthonormal_drift(R):
    """Largest deviation of ``R^T R`` from identity, per batch member."""
    return np.max(np.abs(T(R) @ R - _I3), axis=(-2, -1))


def _reorthonormalize(R, scheduled):
    if scheduled:
        return project_to_so3(R)
    drift = _orthonormal_drift(R) > _ORTHO_DRIFT
    if not drift.any():
        return R
    return np.where(drift[..., None, None], project_to_so3(R), R)


def _rotvecs(R):
    """Rotation vectors of ``(..., 3, 3)`` matrices; NaN where ``R`` is NaN."""
    flat = R.reshape(-1, 3, 3)
    bad = ~np.all(np.isfinite(flat), axis=(1, 2))
    flat = np.where(bad[:, None, None], _I3, flat)
    out = Rotation.from_matrix(flat).as_rotvec()
    out[bad] = np.nan
    return out.reshape(R.shape[:-2] + (3,))


def _batch_state(X0, batch, name="initial_state"):
    """Broadcast a single state to ``batch`` members or check a batched one."""
    shape = X0.batch_shape
    if shape == ():
        parts = {
            f: np.broadcast_to(getattr(X0, f), (batch,) + getattr(X0, f).shape).copy()
            for f in X0.__dataclass_fields__
        }
        return type(X0)(**parts)
    if shape != (batch,):
        raise ValueError(f"{name} has batch shape {shape}, expected ({batch},)")
    return X0


def _batch_cov(P, batch, dim):
    P = np.array(P, dtype=float)
    if P.shape == (dim, dim):
        return np.broadcast_to(P, (batch, dim, dim)).copy()
    if P.shape != (batch, dim, dim):
        raise ValueError(f"initial_cov must be {dim}x{dim} or ({batch}, {dim}, {dim})")
    return P


class _StreamFilter(TransformerMixin, BaseEstimator):
    """Shared driver for the sensor-table filters."""

    def fit(self, X, y=None):
        """Run the filter over the sensor table (or stack of tables) ``X``."""
        X, batched = check_sensor_stack(X)
        self._start(X.shape[0], batched)
        # a diverging member overflows before it is detected and reset
        with np.errstate(over="ignore", invalid="ignore"):
            self._run(X)
        return self

    def partial_fit(self, X, y=None):
        """Continue filtering with the rows of ``X``.

        The first call behaves like :meth:`fit`; later calls require
        timestamps after the last processed row and the same batch layout.
        """
        X, batched = check_sensor_stack(X)
        if not hasattr(self, "times_"):
            self._start(X.shape[0], batched)
        elif batched != self._batched or X.shape[0] != self._batch:
            raise ValueError("partial_fit must keep the batch layout of the first call")
        elif X[0, 0, 0] <= self.times_[-1]:
            raise ValueError("partial_fit rows must continue after the last timestamp")
        # a diverging member overflows before it is detected and reset
        with np.errstate(over="ignore", invalid="ignore"):
            self._run(X)
        return self

    def transform(self, X):
        """Run a fresh filter over ``X`` and return its estimate table."""
        return self.fit(X).estimates_

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y).estimates_

    def _start(self, batch, batched):
        self._batch = batch
        self._batched = batched
        self._prev_imu = None
        self._gyro_tail = None
        self._steps = 0
        self._n_updates = np.zeros(batch, dtype=int)
        self._n_rejected = np.zeros(batch, dtype=int)
        self._diverged = np.full(batch, -1)
        self._history = {}

    def _unbatch(self, value):
        return value if self._batched else value[0]

    def _check_finite(self, parts, step, t):
        """Record members whose state turned non-finite and restart them.

        Restarted members keep running on finite numbers so they cannot
        disturb the rest of the batch; their outputs are masked afterwards.
        A single (unstacked) filter raises instead.
        """
        bad = np.zeros(self._batch, dtype=bool)
        for x in parts:
            bad |= ~np.isfinite(x).reshape(self._batch, -1).all(axis=1)
        if not bad.any():
            return
        if not self._batched:
            raise FilterDivergenceError(step, t)
        self._diverged[bad & (self._diverged < 0)] = step
        self._reset(bad)

    def _record(self, out, times, step_seconds, first_step):
        """Append a chunk of time-major histories and refresh the attributes."""
        out = {key: np.swapaxes(value, 0, 1) for key, value in out.items()}
        for b in np.flatnonzero(self._diverged >= 0):
            start = max(self._diverged[b] - first_step, 0)
            for value in out.values():
                value[b, start:] = np.nan
        out["times"] = times
        out["step_seconds"] = step_seconds
        for key, value in out.items():
            if key in self._history:
                axis = 0 if key in _SHARED_KEYS else 1
                self._history[key] = np.concatenate([self._history[key], value], axis=axis)
            else:
                self._history[key] = value
        for key, value in self._history.items():
            setattr(self, key + "_", value if key in _SHARED_KEYS else self._unbatch(value))
        self.n_updates_ = self._unbatch(self._n_updates.copy())
        self.n_rejected_ = self._unbatch(self._n_rejected.copy())
        self.divergence_step_ = self._unbatch(self._diverged.copy())

    def _time_column(self):
        h = self._history
        B, n = h["v"].shape[:2]
        return np.broadcast_to(h["times"][None, :, None], (B, n, 1))

    def _noise(self):
        return NoiseSpec(
            self.sd_accel,
            self.sd_gyro,
            self.sd_kin_meas,
            getattr(self, "sd_offset_p", 0.0),
            getattr(self, "sd_offset_R", 0.0),
            getattr(self, "sd_contact", 0.0),
        )

    def _world(self):
        return WorldConstants(self.gravity)

    def _rows(self, X):
        """Time-major view of a stack, its odometry mask and cleaned odometry.

        Rows without odometry get zeros so that inactive members of a stack
        stay finite.
        """
        Xt = X.transpose(1, 0, 2)
        has_odo = odometry_mask(Xt)
        odo = np.where(has_odo[..., None], Xt[..., 7:13], 0.0)
        return Xt, has_odo, odo

    def _maintenance_due(self):
        return self._steps % _DRIFT_CHECK_EVERY == 0 or self._steps % self.reorth_interval == 0


class OffsetInEKF(_StreamFilter):
    """Invariant EKF jointly estimating body motion and IMU placement offsets.

    Parameters
    ----------
    sd_accel, sd_gyro : float
        IMU noise standard deviations per sample [m/s^2], [rad/s].
    sd_kin_meas : float
        Contact-velocity measurement noise [m/s].
    sd_offset_p, sd_offset_R : float
        Random-walk intensities of the placement offsets [m/sqrt(s)],
        [rad/sqrt(s)].
    gravity : array-like of shape (3,)
    initial_state : GroupState, optional
        Initial estimate; identity when omitted.  For a stack of tables it
        may be batched along a leading axis.
    initial_cov : ndarray of shape (15, 15) or (B, 15, 15), optional
        Initial invariant-error covariance; when omitted it is built from
        ``initial_sd`` with :func:`~offset_inekf.proposed.initial_covariance`.
    initial_sd : tuple of 5 floats
        Standard deviations of the initial orientation [rad], velocity [m/s],
        position [m], offset rotation [rad] and offset position [m] errors.
    rate_halfwidth : int
        The body rate inside the measurement model is the mean of the
        ``2 * rate_halfwidth`` gyro readings centred on the odometry time
        (the current reading alone when 0).  Averaging reduces the noise that
        the gyro injects into the offset estimates; ``partial_fit`` cannot
        look past the end of a chunk.
    rate_bias_correction : bool
        Remove the mean correction that the remaining rate noise induces in
        the offsets (see :func:`~offset_inekf.proposed.rate_noise_bias`).
    excitation_gate : float
        The offsets are only corrected while the averaged body rate stands
        out from its noise, ``|w|^2 > excitation_gate^2 * 3 * var(w)``;
        otherwise the update leaves them unchanged (see ``offset_update`` in
        :func:`~offset_inekf.proposed.update`).  Without rotation the offsets
        are unobservable and the noisy regressors would make them wander.
        0 disables the gate.
    reorth_interval : int
        Steps between unconditional re-orthonormalisations of the rotations.
    cond_max : float
        Largest accepted condition number of the innovation covariance.

    Attributes
    ----------
    times_ : ndarray of shape (n,)
    R_, v_, p_, dR_, dp_ : ndarray
        Posterior estimate at each processed row.
    cov_diag_ : ndarray of shape (n, 15)
    step_seconds_ : ndarray of shape (n,)
        Wall time spent on each row (for the whole stack when batched).
    belief_ : FilterBelief
        Belief after the last row.
    estimates_ : ndarray of shape (n, 16)
        ``t, v, p, rotvec(R), rotvec(dR), dp``.
    n_updates_, n_rejected_ : int
        Applied and rejected odometry updates.
    divergence_step_ : int
        First non-finite step of a stacked member, -1 if none.
    """

    def __init__(
        self,
        sd_accel=0.589,
        sd_gyro=0.055,
        sd_kin_meas=0.2,
        sd_offset_p=0.01,
        sd_offset_R=0.01,
        gravity=(0.0, 0.0, -9.81),
        initial_state=None,
        initial_cov=None,
        initial_sd=(np.radians(30.0) / np.sqrt(3.0), 1.0 / np.sqrt(3.0), np.sqrt(0.1),
                    np.radians(45.0), 0.1),
        rate_halfwidth=10,
        rate_bias_correction=True,
        excitation_gate=3.0,
        reorth_interval=1000,
        cond_max=COND_MAX,
    ):  # fmt: skip
        self.sd_accel = sd_accel
        self.sd_gyro = sd_gyro
        self.sd_kin_meas = sd_kin_meas
        self.sd_offset_p = sd_offset_p
        self.sd_offset_R = sd_offset_R
        self.gravity = gravity
        self.initial_state = initial_state
        self.initial_cov = initial_cov
        self.initial_sd = initial_sd
        self.rate_halfwidth = rate_halfwidth
        self.rate_bias_correction = rate_bias_correction
        self.excitation_gate = excitation_gate
        self.reorth_interval = reorth_interval
        self.cond_max = cond_max

    def initial_belief(self, batch=None):
        """Initial belief, broadcast to ``batch`` members when given."""
        X0 = GroupState.identity() if self.initial_state is None else self.initial_state
        if batch is not None:
            X0 = _batch_state(X0, batch)
        if self.initial_cov is None:
            P0 = initial_covariance(X0, *self.initial_sd)
        elif batch is None:
            P0 = np.array(self.initial_cov, dtype=float)
            if P0.shape != (DIM, DIM):
                raise ValueError(f"initial_cov must be {DIM}x{DIM}")
        else:
            P0 = _batch_cov(self.initial_cov, batch, DIM)
        return FilterBelief(X0, P0)

    def _start(self, batch, batched):
        super()._start(batch, batched)
        self._belief = self._initial = self.initial_belief(batch)
        self.belief_ = self._public_belief()

    def _public_belief(self):
        b = self._belief
        return b if self._batched else FilterBelief(b.X[0], b.P[0])

    def _reset(self, bad):
        b, init = self._belief, self._initial
        self._belief = FilterBelief(
            select(bad, init.X, b.X), np.where(bad[:, None, None], init.P, b.P)
        )

    def _measurement_rates(self, gyro):
        """Body rate inside the measurement model for each new (time-major) row."""
        m = int(self.rate_halfwidth)
        if m < 0:
            raise ValueError("rate_halfwidth must be nonnegative")
        if m == 0:
            return gyro
        tail = self._gyro_tail
        full = np.concatenate([tail, gyro]) if tail is not None else gyro
        offset = 0 if tail is None else tail.shape[0]
        self._gyro_tail = full[-m:].copy()
        return centered_rates(full, m)[offset:]

    def _run(self, X):
        noise, world = self._noise(), self._world()
        Xt, has_odo, odo = self._rows(X)
        n, B = Xt.shape[:2]
        out = {
            "R": np.empty((n, B, 3, 3)),
            "v": np.empty((n, B, 3)),
            "p": np.empty((n, B, 3)),
            "dR": np.empty((n, B, 3, 3)),
            "dp": np.empty((n, B, 3)),
            "cov_diag": np.empty((n, B, DIM)),
        }
        step_seconds = np.empty(n)
        prev, first_step = self._prev_imu, self._steps
        rates = self._measurement_rates(Xt[..., 4:7])
        rate_var = self.sd_gyro**2 / max(2 * int(self.rate_halfwidth), 1)
        if self.excitation_gate > 0:
            gate = np.sum(rates * rates, axis=-1) > self.excitation_gate**2 * 3.0 * rate_var
        else:
            gate = np.ones(rates.shape[:-1], dtype=bool)
        if not self.rate_bias_correction:
            rate_var = 0.0
        diag = np.arange(DIM)
        for k in range(n):
            start = time.perf_counter()
            row = Xt[k]
            t = float(row[0, 0])
            imu = ImuSample(t, row[:, 1:4], row[:, 4:7])
            belief = self._belief
            if prev is not None:
                belief = predict(belief, prev, t - prev.t, noise, world)
            act = has_odo[k]
            if act.any():
                belief = update(
                    belief,
                    -odo[k, :, 3:6],
                    rates[k],
                    odo[k, :, 0:3],
                    noise,
                    self.cond_max,
                    rate_var,
                    active=act,
                    offset_update=gate[k],
                )
                self._n_updates += act
                self._n_rejected += belief.rejected
            self._steps += 1
            if self._maintenance_due():
                scheduled = self._steps % self.reorth_interval == 0
                Xs = belief.X
                Xs = GroupState(
                    _reorthonormalize(Xs.R, scheduled),
                    Xs.v,
                    Xs.p,
                    _reorthonormalize(Xs.dR, scheduled),
                    Xs.dp,
                )
                belief = FilterBelief(Xs, belief.P)
            self._belief = belief
            X_ = belief.X
            self._check_finite((X_.R, X_.v, X_.p, X_.dR, X_.dp, belief.P), self._steps - 1, t)
            belief = self._belief
            est = belief.X
            out["R"][k] = est.R
            out["v"][k] = est.v
            out["p"][k] = est.p
            out["dR"][k] = est.dR
            out["dp"][k] = est.dp
            out["cov_diag"][k] = belief.P[:, diag, diag]
            prev = imu
            step_seconds[k] = time.perf_counter() - start
        self._prev_imu = prev
        self._record(out, Xt[:, 0, 0].copy(), step_seconds, first_step)
        self.belief_ = self._public_belief()
        h = self._history
        table = np.concatenate(
            [self._time_column(), h["v"], h["p"], _rotvecs(h["R"]), _rotvecs(h["dR"]), h["dp"]],
            axis=-1,
        )
        self.estimates_ = self._unbatch(table)

    @property
    def state_(self):
        check_is_fitted(self, "belief_")
        return self.belief_.X


class ContactInEKF(_StreamFilter):
    """Contact-aided invariant EKF that assumes aligned IMU/measurement frames.

    Parameters mirror :class:`OffsetInEKF`.  ``sd_kin_meas`` is a contact
    position noise [m] and ``sd_contact`` the contact slip intensity [m/s].
    ``initial_state`` may be a :class:`GroupState` (offsets are ignored) or a
    :class:`~offset_inekf.baseline.BaselineState`; in the former case the
    contact position is seeded from the first odometry row.

    Attributes
    ----------
    times_, R_, v_, p_, d_, step_seconds_ : ndarray
    state_ : BaselineState
    cov_ : ndarray of shape (12, 12)
    estimates_ : ndarray of shape (n, 13)
        ``t, v, p, rotvec(R), d``.
    """

    def __init__(
        self,
        sd_accel=0.5,
        sd_gyro=0.05,
        sd_kin_meas=0.05,
        sd_contact=0.05,
        gravity=(0.0, 0.0, -9.81),
        initial_state=None,
        initial_cov=None,
        initial_sd=(np.radians(30.0) / np.sqrt(3.0), 1.0 / np.sqrt(3.0), np.sqrt(0.1)),
        reorth_interval=1000,
        cond_max=COND_MAX,
    ):
        self.sd_accel = sd_accel
        self.sd_gyro = sd_gyro
        self.sd_kin_meas = sd_kin_meas
        self.sd_contact = sd_contact
        self.gravity = gravity
        self.initial_state = initial_state
        self.initial_cov = initial_cov
        self.initial_sd = initial_sd
        self.reorth_interval = reorth_interval
        self.cond_max = cond_max

    def _start(self, batch, batched):
        super()._start(batch, batched)
        self._state = None
        self._cov = None
        self.state_ = None
        self.cov_ = None

    def _seed(self, row):
        """Initial state and covariance from the first row of each member."""
        X0 = self.initial_state
        B = row.shape[0]
        if isinstance(X0, BaselineState):
            state = _batch_state(X0, B)
        else:
            X0 = _batch_state(GroupState.identity() if X0 is None else X0, B)
            if not np.all(np.isfinite(row[:, 7])):
                raise ValueError("the first row needs odometry to seed the contact position")
            state = BaselineState(X0.R, X0.v, X0.p, X0.p + mv(X0.R, row[:, 7:10]))
        if self.initial_cov is None:
            cov = baseline_initial_covariance(state, *self.initial_sd, self.sd_kin_meas)
        else:
            cov = _batch_cov(self.initial_cov, B, BASELINE_DIM)
        self._initial = (state, cov)
        return state, cov

    def _reset(self, bad):
        state0, cov0 = self._initial
        self._state = select(bad, state0, self._state)
        self._cov = np.where(bad[:, None, None], cov0, self._cov)

    def _run(self, X):
        noise, world = self._noise(), self._world()
        Xt, has_odo, odo = self._rows(X)
        n, B = Xt.shape[:2]
        out = {
            "R": np.empty((n, B, 3, 3)),
            "v": np.empty((n, B, 3)),
            "p": np.empty((n, B, 3)),
            "d": np.empty((n, B, 3)),
        }
        step_seconds = np.empty(n)
        prev, first_step = self._prev_imu, self._steps
        for k in range(n):
            start = time.perf_counter()
            row = Xt[k]
            t = float(row[0, 0])
            imu = ImuSample(t, row[:, 1:4], row[:, 4:7])
            state, cov = self._state, self._cov
            if state is None:
                state, cov = self._seed(row)
            elif prev is not None:
                state, cov = baseline_predict(state, cov, prev, t - prev.t, noise, world)
            act = has_odo[k]
            if act.any():
                state, cov, ok = _baseline_update(
                    state, cov, odo[k, :, 0:3], noise, self.cond_max, act
                )
                self._n_updates += act
                self._n_rejected += act & ~ok
            self._steps += 1
            if self._maintenance_due():
                scheduled = self._steps % self.reorth_interval == 0
                state = BaselineState(
                    _reorthonormalize(state.R, scheduled), state.v, state.p, state.d
                )
            self._state, self._cov = state, cov
            self._check_finite((state.R, state.v, state.p, state.d, cov), self._steps - 1, t)
            state = self._state
            out["R"][k] = state.R
            out["v"][k] = state.v
            out["p"][k] = state.p
            out["d"][k] = state.d
            prev = imu
            step_seconds[k] = time.perf_counter() - start
        self._prev_imu = prev
        self._record(out, Xt[:, 0, 0].copy(), step_seconds, first_step)
        self.state_ = self._state if self._batched else self._state[0]
        self.cov_ = self._unbatch(self._cov)
        h = self._history
        table = np.concatenate(
            [self._time_column(), h["v"], h["p"], _rotvecs(h["R"]), h["d"]], axis=-1
        )
        self.estimates_ = self._unbatch(table)

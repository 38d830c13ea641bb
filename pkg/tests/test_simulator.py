import numpy as np
import pytest

from offset_inekf.data import NoiseSpec, WorldConstants
from offset_inekf.estimators import OffsetInEKF
from offset_inekf.lie import GroupState
from offset_inekf.proposed import propagate_state
from offset_inekf.simulator import (
    FrameOffsets,
    MotionProfile,
    generate_trajectory,
    noiseless_imu,
    read_sensor_csv,
    synthesize_imu,
    synthesize_leg_odometry,
    to_sensor_array,
    write_sensor_csv,
)
from offset_inekf.validation import SENSOR_COLUMNS

ZERO = NoiseSpec(0, 0, 0, 0, 0, 0)
OFFSETS = FrameOffsets.from_magnitudes(45.0, 0.12)


@pytest.fixture(scope="module")
def squat():
    return generate_trajectory(MotionProfile(stand_duration=2.0, squat_duration=8.0), OFFSETS)


class TestTrajectory:
    def test_stand_phase_is_static(self, squat):
        stand = squat.t < squat.squat_onset
        assert np.array_equal(squat.v[stand], np.zeros_like(squat.v[stand]))
        assert np.array_equal(squat.R[stand], np.broadcast_to(squat.R[0], squat.R[stand].shape))

    def test_vertical_peak_to_peak(self):
        profile = MotionProfile(stand_duration=1.0, squat_duration=5.0, vertical_amplitude=0.3)
        traj = generate_trajectory(profile)
        z = traj.p[:, 2]
        assert abs((z.max() - z.min()) - 2 * profile.vertical_amplitude) < 1e-12

    def test_velocity_is_derivative_of_position(self, squat):
        h = squat.profile.dt
        p = squat.p
        fd = (p[:-4] - 8 * p[1:-3] + 8 * p[3:-1] - p[4:]) / (12 * h)
        np.testing.assert_allclose(fd, squat.v[2:-2], atol=1e-6, rtol=0)

    def test_contact_is_stationary(self, squat):
        assert squat.d.shape == (3,)
        assert np.array_equal(squat[0].d, squat[len(squat) - 1].d)

    def test_offsets_invert_analytically(self, squat):
        recovered = np.einsum("nij,jk,nk->ni", squat.R, OFFSETS.dR.T, squat.d_m + OFFSETS.dp)
        np.testing.assert_allclose(recovered, squat.d - squat.p, atol=1e-12)

    def test_contact_velocity_is_derivative_of_position(self, squat):
        fd = (squat.d_m[2:] - squat.d_m[:-2]) / (2 * squat.profile.dt)
        np.testing.assert_allclose(fd, squat.d_m_dot[1:-1], atol=2e-3, rtol=0)

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(stand_duration=-1.0),
            dict(stand_duration=0.0, squat_duration=0.0),
            dict(cycle_period=0.0),
            dict(sample_rate=-5.0),
            dict(vertical_amplitude=np.nan),
            dict(chest_position=(0.0, 1.0)),
        ],
    )
    def test_invalid_profile(self, kwargs):
        with pytest.raises(ValueError):
            MotionProfile(**kwargs)

    def test_with_duration(self):
        p = MotionProfile().with_duration(1.0)
        assert p.stand_duration == 1.0 and p.squat_duration == 0.0
        assert p.n_samples == 100

    def test_frame_offsets(self):
        assert OFFSETS.angle == pytest.approx(np.radians(45.0))
        assert np.linalg.norm(OFFSETS.dp) == pytest.approx(0.12)
        with pytest.raises(ValueError):
            FrameOffsets(dR=2 * np.eye(3))


class TestImu:
    def test_static_readings(self):
        traj = generate_trajectory(MotionProfile(stand_duration=1.0, squat_duration=0.0), OFFSETS)
        imu = synthesize_imu(traj, ZERO)
        expected = np.einsum("nji,j->ni", traj.R, -traj.g)
        np.testing.assert_allclose(imu.a_tilde, expected, atol=1e-12)
        np.testing.assert_allclose(imu.omega_tilde, 0.0, atol=1e-15)

    def test_noiseless_roundtrip(self):
        traj = generate_trajectory(MotionProfile(stand_duration=1.0, squat_duration=9.0), OFFSETS)
        imu = synthesize_imu(traj, ZERO)
        world = WorldConstants(traj.g)
        X = GroupState(traj.R[0], traj.v[0], traj.p[0], np.eye(3), np.zeros(3))
        worst = 0.0
        for k in range(1, len(traj)):
            X = propagate_state(X, imu[k - 1], traj.profile.dt, world)
            worst = max(worst, np.linalg.norm(X.p - traj.p[k]))
        assert worst < 1e-4

    def test_noise_level(self, squat):
        traj = generate_trajectory(MotionProfile(stand_duration=10.0, squat_duration=50.0), OFFSETS)
        noise = NoiseSpec.proposed()
        clean, noisy = noiseless_imu(traj), synthesize_imu(traj, noise, seed=11)
        assert len(traj) == 6000
        for sd, a, b in ((noise.sd_accel, noisy.a_tilde, clean.a_tilde), (noise.sd_gyro, noisy.omega_tilde, clean.omega_tilde)):
            assert np.std(a - b) == pytest.approx(sd, rel=0.05)

    def test_seeded_determinism(self, squat):
        a, b = synthesize_imu(squat, seed=4), synthesize_imu(squat, seed=4)
        assert np.array_equal(a.a_tilde, b.a_tilde) and np.array_equal(a.omega_tilde, b.omega_tilde)
        c = synthesize_imu(squat, seed=5)
        assert not np.array_equal(a.a_tilde, c.a_tilde)


class TestOdometry:
    def test_static_without_offsets(self):
        traj = generate_trajectory(MotionProfile(stand_duration=1.0, squat_duration=0.0))
        odo = synthesize_leg_odometry(traj, noise=ZERO)
        assert np.array_equal(odo.d_m_dot, np.zeros_like(odo.d_m_dot))

    def test_other_offsets_move_measurement_frame(self, squat):
        other = FrameOffsets()
        odo = synthesize_leg_odometry(squat, other, ZERO)
        body = np.einsum("nji,nj->ni", squat.R, squat.d - squat.p)
        np.testing.assert_allclose(odo.d_m, body, atol=1e-12)

    def test_seeded_determinism(self, squat):
        a = synthesize_leg_odometry(squat, seed=2, sd_position=0.05)
        b = synthesize_leg_odometry(squat, seed=2, sd_position=0.05)
        assert np.array_equal(a.d_m, b.d_m) and np.array_equal(a.d_m_dot, b.d_m_dot)

    def test_noise_levels(self, squat):
        odo = synthesize_leg_odometry(squat, noise=NoiseSpec.proposed(), seed=1, sd_position=0.05)
        assert np.std(odo.d_m_dot - squat.d_m_dot) == pytest.approx(0.2, rel=0.05)
        assert np.std(odo.d_m - squat.d_m) == pytest.approx(0.05, rel=0.05)


def test_consistency_triangle():
    traj = generate_trajectory(MotionProfile(stand_duration=2.0, squat_duration=18.0), OFFSETS)
    X = to_sensor_array(synthesize_imu(traj, ZERO), synthesize_leg_odometry(traj, noise=ZERO))
    X0 = GroupState(traj.R[0], traj.v[0], traj.p[0], OFFSETS.dR, OFFSETS.dp)
    # noiseless rates: average only the two intervals around each odometry time
    est = OffsetInEKF(initial_state=X0, initial_sd=(1e-3,) * 5, rate_halfwidth=1, rate_bias_correction=False)
    est.fit(X)
    assert np.linalg.norm(est.v_ - traj.v, axis=1).max() <= 1e-3


class TestSensorTable:
    def test_layout_and_csv_roundtrip(self, squat, tmp_path):
        X = to_sensor_array(synthesize_imu(squat, seed=1), synthesize_leg_odometry(squat, seed=1))
        assert X.shape == (len(squat), len(SENSOR_COLUMNS))
        path = tmp_path / "s.csv"
        write_sensor_csv(path, X)
        Y = read_sensor_csv(path)
        np.testing.assert_allclose(Y, X, rtol=1e-8, atol=1e-12)
        assert path.read_text().splitlines()[0] == ",".join(SENSOR_COLUMNS)

    def test_missing_odometry_rows_are_nan(self, squat):
        odo = synthesize_leg_odometry(squat)
        sparse = type(odo)(odo.t[::2], odo.d_m[::2], odo.d_m_dot[::2])
        X = to_sensor_array(synthesize_imu(squat), sparse)
        assert np.all(np.isnan(X[1::2, 7:])) and np.all(np.isfinite(X[::2]))

    def test_misaligned_odometry_rejected(self, squat):
        odo = synthesize_leg_odometry(squat)
        shifted = type(odo)(odo.t + 0.003, odo.d_m, odo.d_m_dot)
        with pytest.raises(ValueError):
            to_sensor_array(synthesize_imu(squat), shifted)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            read_sensor_csv(path)

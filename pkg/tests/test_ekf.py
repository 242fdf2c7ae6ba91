import numpy as np
import pytest

from lidarmesh import dataset as ds
from lidarmesh import ekf
from lidarmesh import synthworld as sw
from lidarmesh.geometry import Pose, quat_from_rotvec


def test_predict_straight_line():
    s = ekf.initial_state(speed=1.0)
    for _ in range(1000):
        s = ekf.predict(s, np.zeros(3), 0.01)
    assert np.allclose(s.position, [10, 0, 0], atol=1e-6)
    assert np.allclose(s.orientation, [1, 0, 0, 0], atol=1e-12)


def test_predict_pure_rotation():
    s = ekf.initial_state(speed=0.0)
    for _ in range(1000):
        s = ekf.predict(s, [0, 0, 0.1], 0.01)
    assert np.isclose(s.pose().yaw(), 1.0, atol=1e-9)
    assert np.allclose(s.position, 0, atol=1e-12)


def test_predict_circle_closes():
    # speed 1, yaw rate 0.1 -> radius 10 circle, back to start after 2pi/0.1
    s = ekf.initial_state(speed=1.0)
    dt = 0.01
    n = int(round(2 * np.pi / 0.1 / dt))
    for _ in range(n):
        s = ekf.predict(s, [0, 0, 0.1], dt)
    circumference = 2 * np.pi * 10.0
    assert np.linalg.norm(s.position) < 0.01 * circumference


def test_predict_rejects_bad_dt():
    s = ekf.initial_state()
    with pytest.raises(ValueError):
        ekf.predict(s, np.zeros(3), 0.0)
    with pytest.raises(ValueError):
        ekf.predict(s, np.zeros(3), -0.1)


def test_update_imu_zero_innovation():
    s = ekf.initial_state(pose=Pose.from_yaw(0.4, [1, 2, 3]), speed=0.5,
                          pos_var=0.1, att_var=0.05, speed_var=0.1)
    s2 = ekf.update_imu_orientation(s, s.orientation, np.eye(3) * 1e-4)
    assert np.allclose(s2.position, s.position, atol=1e-9)
    assert np.allclose(s2.orientation, s.orientation, atol=1e-9)
    assert abs(s2.forward_speed - s.forward_speed) < 1e-9


def test_update_imu_uninformative():
    s = ekf.initial_state(pose=Pose.from_yaw(0.2), pos_var=0.1, att_var=0.1)
    q_meas = quat_from_rotvec([0, 0, 0.5])
    s2 = ekf.update_imu_orientation(s, q_meas, np.eye(3) * 1e12)
    assert np.allclose(s2.orientation, s.orientation, atol=1e-6)


def test_update_imu_equal_variance_halves():
    s = ekf.initial_state(att_var=0.01)
    q_meas = quat_from_rotvec([0, 0, 0.1])
    s2 = ekf.update_imu_orientation(s, q_meas, np.eye(3) * 0.01)
    assert np.isclose(s2.pose().yaw(), 0.05, atol=1e-6)


def test_update_imu_trace_non_increasing():
    rng = np.random.default_rng(0)
    s = ekf.initial_state(pos_var=0.5, att_var=0.3, speed_var=0.2)
    for _ in range(20):
        s = ekf.predict(s, rng.normal(0, 0.2, 3), 0.05)
        before = np.trace(s.covariance[3:6, 3:6])
        s = ekf.update_imu_orientation(
            s, quat_from_rotvec(rng.normal(0, 0.1, 3)), np.eye(3) * 0.01)
        after = np.trace(s.covariance[3:6, 3:6])
        assert after <= before + 1e-12


def test_update_wheel_examples():
    s = ekf.initial_state(speed=1.5, speed_var=0.3)
    s2 = ekf.update_wheel_speed(s, 1.5, 0.1)
    assert abs(s2.forward_speed - 1.5) < 1e-12

    s = ekf.initial_state(speed=0.0, speed_var=1.0)
    s2 = ekf.update_wheel_speed(s, 2.0, 1.0)
    assert np.isclose(s2.forward_speed, 1.0, atol=1e-12)

    s2 = ekf.update_wheel_speed(s, 0.7, 0.0)
    assert s2.forward_speed == 0.7
    assert np.allclose(s2.covariance[6, :], 0)
    assert np.allclose(s2.covariance[:, 6], 0)


def test_covariance_stays_psd():
    rng = np.random.default_rng(1)
    s = ekf.initial_state(pos_var=0.1, att_var=0.1, speed_var=0.1)
    for k in range(200):
        s = ekf.predict(s, rng.normal(0, 0.3, 3), 0.01)
        if k % 3 == 0:
            s = ekf.update_imu_orientation(
                s, quat_from_rotvec(rng.normal(0, 0.05, 3)),
                np.eye(3) * 0.02 ** 2)
        if k % 5 == 0:
            s = ekf.update_wheel_speed(s, rng.normal(1.0, 0.1), 0.05 ** 2)
        assert np.allclose(s.covariance, s.covariance.T, atol=1e-12)
        assert np.linalg.eigvalsh(s.covariance).min() >= -1e-9


def test_prior_delta_examples():
    a = ekf.initial_state(stamp=0.0)
    b = ekf.initial_state(stamp=1.0)
    d = ekf.prior_delta(a, b)
    assert np.allclose(d.t, 0) and np.isclose(d.q[0], 1.0)

    b = ekf.initial_state(stamp=1.0, pose=Pose(t=[1, 0, 0]))
    d = ekf.prior_delta(a, b)
    assert np.allclose(d.t, [1, 0, 0])

    a = ekf.initial_state(stamp=0.0, pose=Pose.from_yaw(np.pi / 2))
    b = ekf.initial_state(stamp=1.0, pose=Pose.from_yaw(np.pi / 2, [0, 1, 0]))
    d = ekf.prior_delta(a, b)
    assert np.allclose(d.t, [1, 0, 0], atol=1e-12)
    assert np.isclose(d.yaw(), 0.0)

    with pytest.raises(ValueError):
        ekf.prior_delta(b, a)


def test_dead_reckoning_zero_noise_dataset(tmp_path):
    # noiseless generated logs: the filter must track ground truth closely
    scene = sw.box_canyon(seed=0, n_obstacles=2)
    path = sw.CirclePath(radius=5.0, speed=1.0)
    spec = sw.TrajectorySpec(path=path, duration=10.0, lidar_hz=10.0,
                             imu_hz=100.0, odom_hz=50.0, camera_hz=0.0,
                             seed=9)
    manifest = sw.generate_dataset(scene, spec, tmp_path / "d",
                                   lidar=sw.LidarModel(beams=2,
                                                       azimuth_steps=30))
    pf = ekf.PriorFilter(start_stamp=0.0, pose=path.pose_at(0.0), speed=1.0)
    for frame in ds.frames(manifest):
        state = pf.process_window(frame.imu, frame.odom, frame.scan.stamp)
    gt = path.pose_at(manifest.scan_stamps[-1])
    assert np.linalg.norm(state.position - gt.t) < 1e-3


def test_constant_speed_mode():
    params = ekf.EkfParams(constant_speed=1.0)
    pf = ekf.PriorFilter(params=params, start_stamp=0.0)
    from lidarmesh.sensors import ImuSample, WheelOdomSample
    imu = [ImuSample(0.1 * k, np.array([1.0, 0, 0, 0]), np.zeros(3),
                     np.zeros(3)) for k in range(1, 11)]
    odom = [WheelOdomSample(0.25, 5.0)]   # must be ignored in this mode
    state = pf.process_window(imu, odom, 1.0)
    assert state.forward_speed == 1.0
    assert np.allclose(state.position, [1.0, 0, 0], atol=1e-9)

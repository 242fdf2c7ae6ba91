"""EKF fusing wheel forward speed with IMU orientation and angular rate.

State: position (3), orientation quaternion, scalar forward speed along
body x. The error state is 7-dimensional [position, attitude, speed]
with the attitude error as a right multiplicative perturbation
q_true = q_est * exp(delta_theta).
"""

from dataclasses import dataclass, replace

import numpy as np

from .geometry import (
    Pose,
    quat_conjugate,
    quat_from_rotvec,
    quat_multiply,
    quat_normalize,
    quat_to_matrix,
    quat_to_rotvec,
)


def _skew(v):
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


@dataclass(frozen=True)
class EkfParams:
    q_pos: float = 0.05 ** 2       # m^2 / s
    q_att: float = 0.01 ** 2       # rad^2 / s
    q_speed: float = 0.1 ** 2      # (m/s)^2 / s
    r_att: float = 0.02 ** 2       # rad^2
    r_speed: float = 0.05 ** 2     # (m/s)^2
    constant_speed: float | None = None   # m/s; replaces wheel odometry


@dataclass(frozen=True)
class EkfState:
    stamp: float
    position: np.ndarray
    orientation: np.ndarray        # (w,x,y,z)
    forward_speed: float
    covariance: np.ndarray         # 7x7 over [dp, dtheta, dv]

    def pose(self):
        return Pose(self.orientation, self.position)


def initial_state(stamp=0.0, pose=None, speed=0.0, pos_var=0.0,
                  att_var=0.0, speed_var=0.0):
    pose = pose or Pose.identity()
    P = np.diag([pos_var] * 3 + [att_var] * 3 + [speed_var]).astype(float)
    return EkfState(stamp, pose.t.copy(), pose.q.copy(), speed, P)


def _symmetrize(P):
    return 0.5 * (P + P.T)


def predict(state, gyro, dt, params=EkfParams()):
    """Propagate by dt using the gyro rate and the forward-speed model."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    gyro = np.asarray(gyro, dtype=float)
    q = state.orientation
    v = state.forward_speed
    R = quat_to_matrix(q)

    q_mid = quat_multiply(q, quat_from_rotvec(gyro * dt * 0.5))
    p = state.position + quat_to_matrix(q_mid)[:, 0] * v * dt
    q_new = quat_normalize(quat_multiply(q, quat_from_rotvec(gyro * dt)))

    F = np.eye(7)
    F[0:3, 3:6] = -R @ _skew([v, 0.0, 0.0]) * dt
    F[0:3, 6] = R[:, 0] * dt
    F[3:6, 3:6] = quat_to_matrix(quat_from_rotvec(gyro * dt)).T
    Q = np.diag([params.q_pos] * 3 + [params.q_att] * 3 + [params.q_speed])
    P = _symmetrize(F @ state.covariance @ F.T + Q * dt)
    return EkfState(state.stamp + dt, p, q_new, v, P)


def _apply_correction(state, dx, P):
    p = state.position + dx[0:3]
    q = quat_normalize(quat_multiply(state.orientation,
                                     quat_from_rotvec(dx[3:6])))
    v = state.forward_speed + dx[6]
    return EkfState(state.stamp, p, q, v, _symmetrize(P))


def update_imu_orientation(state, q_meas, R_att, params=EkfParams()):
    """Absolute orientation update; innovation in the right-error chart."""
    q_meas = quat_normalize(np.asarray(q_meas, dtype=float))
    z = quat_to_rotvec(quat_normalize(
        quat_multiply(quat_conjugate(state.orientation), q_meas)))
    P = state.covariance
    S = P[3:6, 3:6] + np.asarray(R_att, dtype=float)
    K = np.linalg.solve(S.T, P[:, 3:6].T).T        # P H^T S^-1
    dx = K @ z
    P_new = P - K @ P[3:6, :]
    return _apply_correction(state, dx, P_new)


def update_wheel_speed(state, v_meas, var, params=EkfParams()):
    """Scalar speed update; var == 0 adopts the measurement exactly."""
    P = state.covariance
    if var == 0.0:
        P_new = P.copy()
        P_new[6, :] = 0.0
        P_new[:, 6] = 0.0
        return EkfState(state.stamp, state.position.copy(),
                        state.orientation.copy(), float(v_meas),
                        _symmetrize(P_new))
    S = P[6, 6] + var
    K = P[:, 6] / S
    dx = K * (v_meas - state.forward_speed)
    P_new = P - np.outer(K, P[6, :])
    return _apply_correction(state, dx, P_new)


def prior_delta(state_prev, state_curr):
    """Relative motion between two filter states, used as the NDT guess."""
    if state_prev.stamp >= state_curr.stamp:
        raise ValueError("states must be in increasing stamp order")
    return state_prev.pose().inverse().compose(state_curr.pose())


class PriorFilter:
    """Streaming wrapper: feeds windowed sensor samples through the EKF.

    IMU samples win stamp ties against wheel samples; each sample's gap
    is predicted with that IMU sample's gyro, wheel gaps and the final
    gap to the window end reuse the last seen gyro.
    """

    def __init__(self, params=EkfParams(), start_stamp=0.0, pose=None,
                 speed=None):
        self.params = params
        if speed is None:
            speed = (params.constant_speed
                     if params.constant_speed is not None else 0.0)
        self.state = initial_state(start_stamp, pose, speed)
        self.last_gyro = np.zeros(3)

    def _predict_to(self, stamp, gyro):
        dt = stamp - self.state.stamp
        if dt > 0:
            self.state = predict(self.state, gyro, dt, self.params)

    def process_window(self, imu_samples, odom_samples, end_stamp):
        """Advance through all samples and on to end_stamp; returns state."""
        merged = ([(s.stamp, 0, s) for s in imu_samples]
                  + [(s.stamp, 1, s) for s in odom_samples])
        merged.sort(key=lambda e: (e[0], e[1]))
        for stamp, kind, sample in merged:
            if kind == 0:
                self._predict_to(stamp, sample.angular_velocity)
                self.last_gyro = np.asarray(sample.angular_velocity,
                                            dtype=float)
                self.state = update_imu_orientation(
                    self.state, sample.orientation,
                    np.eye(3) * self.params.r_att, self.params)
            else:
                self._predict_to(stamp, self.last_gyro)
                if self.params.constant_speed is None:
                    self.state = update_wheel_speed(
                        self.state, sample.forward_velocity,
                        self.params.r_speed, self.params)
        self._predict_to(end_stamp, self.last_gyro)
        return self.state

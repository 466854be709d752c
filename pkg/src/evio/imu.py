"""IMU preintegration between keyframes and the inertial residual factor.

Conventions:

* The accelerometer measures specific force ``f = R^T (a_w - g_w)`` in the
  body frame, with gravity ``g_w = (0, 0, -9.81)`` pointing down.  A body at
  rest with identity attitude therefore reads ``(0, 0, +9.81)``.
* Preintegrated deltas (alpha, beta, gamma) live in the body frame at the
  interval start and are independent of the world-frame state there.
* Error-state and residual ordering is ``[d_alpha, d_beta, d_theta, d_ba,
  d_bg]`` (15 rows).
* Keyframe state increments are ``[dp_world, dtheta_body, dv, dba, dbg]``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import (
    Pose,
    quat_conjugate,
    quat_from_rotvec,
    quat_multiply,
    quat_to_matrix,
    skew,
    so3_exp,
    so3_right_jacobian,
)

GRAVITY_MAGNITUDE = 9.81


def gravity_world() -> np.ndarray:
    return np.array([0.0, 0.0, -GRAVITY_MAGNITUDE])


class EmptyInterval(Exception):
    """Fewer than two IMU samples span the keyframe interval."""


class BiasDeltaTooLarge(Exception):
    """Bias moved too far from the linearization point; repropagate instead."""


# first-order bias correction is trusted only within this delta (per axis)
BIAS_DELTA_LIMIT = 0.1


@dataclass(frozen=True)
class ImuNoise:
    """Continuous-time noise densities (units per sqrt(Hz))."""

    sigma_a: float = 2e-2  # accelerometer white noise, m/s^2/sqrt(Hz)
    sigma_g: float = 1.7e-3  # gyroscope white noise, rad/s/sqrt(Hz)
    sigma_ba: float = 1e-3  # accelerometer bias walk
    sigma_bg: float = 1e-4  # gyroscope bias walk


@dataclass(frozen=True)
class KeyframeState:
    """Full state of one keyframe: body pose, velocity, and IMU biases."""

    pose: Pose  # T^w_b
    velocity: np.ndarray  # m/s, world frame
    bias_a: np.ndarray  # m/s^2
    bias_g: np.ndarray  # rad/s

    def __post_init__(self):
        for name in ("velocity", "bias_a", "bias_g"):
            v = np.array(getattr(self, name), dtype=np.float64)
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @staticmethod
    def identity() -> "KeyframeState":
        return KeyframeState(Pose.identity(), np.zeros(3), np.zeros(3), np.zeros(3))

    def retract(self, delta: np.ndarray) -> "KeyframeState":
        """Apply a 15-vector increment [dp, dtheta, dv, dba, dbg]."""
        dp, dth, dv = delta[0:3], delta[3:6], delta[6:9]
        q = quat_multiply(self.pose.q, quat_from_rotvec(dth))
        return KeyframeState(
            Pose(q, self.pose.t + dp),
            self.velocity + dv,
            self.bias_a + delta[9:12],
            self.bias_g + delta[12:15],
        )

    def local_coordinates(self, reference: "KeyframeState") -> np.ndarray:
        """Increment delta with reference.retract(delta) == self to 1st order."""
        from .geometry import rotvec_from_quat

        dq = quat_multiply(quat_conjugate(reference.pose.q), self.pose.q)
        return np.concatenate(
            [
                self.pose.t - reference.pose.t,
                rotvec_from_quat(dq),
                self.velocity - reference.velocity,
                self.bias_a - reference.bias_a,
                self.bias_g - reference.bias_g,
            ]
        )


@dataclass(frozen=True)
class PreintegratedImu:
    """Relative motion deltas over one keyframe interval.

    ``bias_jacobian`` is 9x6 with rows [d_alpha, d_beta, d_theta] against
    columns [d_ba, d_bg], accumulated to first order during propagation.
    """

    alpha: np.ndarray  # m
    beta: np.ndarray  # m/s
    gamma: np.ndarray  # unit quaternion (w,x,y,z)
    dt_total: float  # s
    covariance: np.ndarray  # 15x15, error-state order
    bias_jacobian: np.ndarray  # 9x6
    lin_bias_a: np.ndarray
    lin_bias_g: np.ndarray


def preintegrate(
    t_us: np.ndarray,
    accel: np.ndarray,
    gyro: np.ndarray,
    bias_a: np.ndarray,
    bias_g: np.ndarray,
    noise: ImuNoise = ImuNoise(),
) -> PreintegratedImu:
    """Midpoint-rule propagation of (alpha, beta, gamma) with bias-corrected
    measurements, discrete error-state covariance, and bias Jacobians."""
    t_us = np.asarray(t_us, dtype=np.int64)
    if t_us.size < 2:
        raise EmptyInterval("need at least 2 IMU samples")
    accel = np.asarray(accel, dtype=np.float64)
    gyro = np.asarray(gyro, dtype=np.float64)
    bias_a = np.asarray(bias_a, dtype=np.float64)
    bias_g = np.asarray(bias_g, dtype=np.float64)

    alpha = np.zeros(3)
    beta = np.zeros(3)
    gamma = np.array([1.0, 0.0, 0.0, 0.0])
    P = np.zeros((15, 15))
    J = np.zeros((9, 6))
    I3 = np.eye(3)

    q_white_a = noise.sigma_a**2
    q_white_g = noise.sigma_g**2
    q_walk_a = noise.sigma_ba**2
    q_walk_g = noise.sigma_bg**2

    for k in range(t_us.size - 1):
        dt = float(t_us[k + 1] - t_us[k]) * 1e-6
        if dt <= 0.0:
            continue
        a0 = accel[k] - bias_a
        a1 = accel[k + 1] - bias_a
        w_mid = 0.5 * (gyro[k] + gyro[k + 1]) - bias_g

        R0 = quat_to_matrix(gamma)
        gamma_next = quat_multiply(gamma, quat_from_rotvec(w_mid * dt))
        gamma_next /= np.linalg.norm(gamma_next)
        R1 = quat_to_matrix(gamma_next)

        a_mid = 0.5 * (R0 @ a0 + R1 @ a1)
        alpha_next = alpha + beta * dt + 0.5 * a_mid * dt * dt
        beta_next = beta + a_mid * dt

        # error-state transition (rows/cols: d_alpha, d_beta, d_theta, d_ba, d_bg)
        # uses the exact one-step rotation factors so the accumulated bias
        # Jacobians are accurate enough for first-order bias correction
        dR_T = so3_exp(-w_mid * dt)
        Jr_dt = so3_right_jacobian(w_mid * dt) * dt
        S1 = R1 @ skew(a1)
        A = 0.5 * (R0 @ skew(a0) + S1 @ dR_T)
        Bg = 0.5 * S1 @ Jr_dt  # d(a_mid)/d(bg) through the attitude error
        F = np.eye(15)
        F[0:3, 3:6] = I3 * dt
        F[0:3, 6:9] = -0.5 * dt * dt * A
        F[0:3, 9:12] = -0.25 * dt * dt * (R0 + R1)
        F[0:3, 12:15] = 0.5 * dt * dt * Bg
        F[3:6, 6:9] = -dt * A
        F[3:6, 9:12] = -0.5 * dt * (R0 + R1)
        F[3:6, 12:15] = dt * Bg
        F[6:9, 6:9] = dR_T
        F[6:9, 12:15] = -Jr_dt

        # noise columns: n_a0, n_w0, n_a1, n_w1, n_ba, n_bg
        G = np.zeros((15, 18))
        G[0:3, 0:3] = 0.25 * dt * dt * R0
        G[0:3, 3:6] = -0.125 * dt**3 * S1
        G[0:3, 6:9] = 0.25 * dt * dt * R1
        G[0:3, 9:12] = -0.125 * dt**3 * S1
        G[3:6, 0:3] = 0.5 * dt * R0
        G[3:6, 3:6] = -0.25 * dt * dt * S1
        G[3:6, 6:9] = 0.5 * dt * R1
        G[3:6, 9:12] = -0.25 * dt * dt * S1
        G[6:9, 3:6] = 0.5 * dt * I3
        G[6:9, 9:12] = 0.5 * dt * I3
        G[9:12, 12:15] = dt * I3
        G[12:15, 15:18] = dt * I3
        q_diag = np.concatenate(
            [
                np.full(3, q_white_a / dt),
                np.full(3, q_white_g / dt),
                np.full(3, q_white_a / dt),
                np.full(3, q_white_g / dt),
                np.full(3, q_walk_a / dt),
                np.full(3, q_walk_g / dt),
            ]
        )
        P = F @ P @ F.T + (G * q_diag) @ G.T
        P = 0.5 * (P + P.T)
        J = F[0:9, 0:9] @ J + F[0:9, 9:15]

        alpha, beta, gamma = alpha_next, beta_next, gamma_next

    dt_total = float(t_us[-1] - t_us[0]) * 1e-6
    return PreintegratedImu(alpha, beta, gamma, dt_total, P, J, bias_a, bias_g)


def correct_for_bias(
    pre: PreintegratedImu, bias_a: np.ndarray, bias_g: np.ndarray
) -> PreintegratedImu:
    """First-order bias correction via the stored bias Jacobians.

    Covariance and Jacobians are carried over unchanged (valid to first
    order); the linearization point moves to the new bias.
    """
    dba = np.asarray(bias_a, dtype=np.float64) - pre.lin_bias_a
    dbg = np.asarray(bias_g, dtype=np.float64) - pre.lin_bias_g
    if np.max(np.abs(dba)) >= BIAS_DELTA_LIMIT or np.max(np.abs(dbg)) >= BIAS_DELTA_LIMIT:
        raise BiasDeltaTooLarge("bias delta exceeds first-order validity; repropagate")
    J = pre.bias_jacobian
    alpha = pre.alpha + J[0:3, 0:3] @ dba + J[0:3, 3:6] @ dbg
    beta = pre.beta + J[3:6, 0:3] @ dba + J[3:6, 3:6] @ dbg
    gamma = quat_multiply(pre.gamma, quat_from_rotvec(J[6:9, 3:6] @ dbg))
    gamma = gamma / np.linalg.norm(gamma)
    return replace(
        pre,
        alpha=alpha,
        beta=beta,
        gamma=gamma,
        lin_bias_a=np.array(bias_a, dtype=np.float64),
        lin_bias_g=np.array(bias_g, dtype=np.float64),
    )


def compose(first: PreintegratedImu, second: PreintegratedImu) -> PreintegratedImu:
    """Chain two consecutive preintegrations (deltas and duration only).

    Covariance and bias Jacobians are not composed; repropagate from raw
    samples when those are needed for a merged interval.
    """
    R1 = quat_to_matrix(first.gamma)
    gamma = quat_multiply(first.gamma, second.gamma)
    return PreintegratedImu(
        alpha=first.alpha + first.beta * second.dt_total + R1 @ second.alpha,
        beta=first.beta + R1 @ second.beta,
        gamma=gamma / np.linalg.norm(gamma),
        dt_total=first.dt_total + second.dt_total,
        covariance=np.zeros((15, 15)),
        bias_jacobian=np.zeros((9, 6)),
        lin_bias_a=first.lin_bias_a,
        lin_bias_g=first.lin_bias_g,
    )


def predict(
    state: KeyframeState, pre: PreintegratedImu, gravity: np.ndarray
) -> KeyframeState:
    """Dead-reckon the next keyframe state from a preintegrated interval."""
    pre = correct_for_bias(pre, state.bias_a, state.bias_g)
    dt = pre.dt_total
    R = state.pose.rotation_matrix()
    p = state.pose.t + state.velocity * dt + 0.5 * gravity * dt * dt + R @ pre.alpha
    v = state.velocity + gravity * dt + R @ pre.beta
    q = quat_multiply(state.pose.q, pre.gamma)
    return KeyframeState(Pose(q, p), v, state.bias_a, state.bias_g)


def _canonical_error_quat(qi, qj, gamma):
    q_err = quat_multiply(quat_multiply(quat_conjugate(qi), qj), quat_conjugate(gamma))
    if q_err[0] < 0.0:
        q_err = -q_err
    return q_err


def imu_residual(
    state_i: KeyframeState,
    state_j: KeyframeState,
    pre: PreintegratedImu,
    gravity: np.ndarray,
) -> np.ndarray:
    """15-vector residual: position, velocity, rotation, and bias deltas.

    The preintegration is first-order corrected to state_i's biases.
    """
    pre = correct_for_bias(pre, state_i.bias_a, state_i.bias_g)
    dt = pre.dt_total
    RiT = state_i.pose.rotation_matrix().T
    r = np.zeros(15)
    r[0:3] = (
        RiT
        @ (
            state_j.pose.t
            - state_i.pose.t
            - state_i.velocity * dt
            - 0.5 * gravity * dt * dt
        )
        - pre.alpha
    )
    r[3:6] = RiT @ (state_j.velocity - state_i.velocity - gravity * dt) - pre.beta
    q_err = _canonical_error_quat(state_i.pose.q, state_j.pose.q, pre.gamma)
    r[6:9] = 2.0 * q_err[1:]
    r[9:12] = state_j.bias_a - state_i.bias_a
    r[12:15] = state_j.bias_g - state_i.bias_g
    return r


def imu_residual_jacobians(
    state_i: KeyframeState,
    state_j: KeyframeState,
    pre: PreintegratedImu,
    gravity: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residual plus 15x15 Jacobians wrt state_i and state_j increments."""
    corrected = correct_for_bias(pre, state_i.bias_a, state_i.bias_g)
    dt = corrected.dt_total
    J = pre.bias_jacobian
    RiT = state_i.pose.rotation_matrix().T
    r = imu_residual(state_i, state_j, pre, gravity)

    q_err = _canonical_error_quat(state_i.pose.q, state_j.pose.q, corrected.gamma)
    w, v = q_err[0], q_err[1:]
    R_gamma = quat_to_matrix(corrected.gamma)

    Ji = np.zeros((15, 15))
    Jj = np.zeros((15, 15))

    # position block
    dp_term = RiT @ (
        state_j.pose.t - state_i.pose.t - state_i.velocity * dt - 0.5 * gravity * dt * dt
    )
    Ji[0:3, 0:3] = -RiT
    Ji[0:3, 3:6] = skew(dp_term)
    Ji[0:3, 6:9] = -RiT * dt
    Ji[0:3, 9:12] = -J[0:3, 0:3]
    Ji[0:3, 12:15] = -J[0:3, 3:6]
    Jj[0:3, 0:3] = RiT

    # velocity block
    dv_term = RiT @ (state_j.velocity - state_i.velocity - gravity * dt)
    Ji[3:6, 3:6] = skew(dv_term)
    Ji[3:6, 6:9] = -RiT
    Ji[3:6, 9:12] = -J[3:6, 0:3]
    Ji[3:6, 12:15] = -J[3:6, 3:6]
    Jj[3:6, 6:9] = RiT

    # rotation block: r = 2 vec(q_err); a bias perturbation enters through the
    # accumulated correction rotvec, hence the right-Jacobian factor
    theta_corr = J[6:9, 3:6] @ (state_i.bias_g - pre.lin_bias_g)
    Ji[6:9, 3:6] = -(w * np.eye(3) - skew(v))
    Ji[6:9, 12:15] = (
        -(w * np.eye(3) + skew(v)) @ R_gamma @ so3_right_jacobian(theta_corr) @ J[6:9, 3:6]
    )
    Jj[6:9, 3:6] = (w * np.eye(3) + skew(v)) @ R_gamma

    # bias blocks
    Ji[9:12, 9:12] = -np.eye(3)
    Ji[12:15, 12:15] = -np.eye(3)
    Jj[9:12, 9:12] = np.eye(3)
    Jj[12:15, 12:15] = np.eye(3)
    return r, Ji, Jj


def slice_between(
    t_us: np.ndarray, accel: np.ndarray, gyro: np.ndarray, t0_us: int, t1_us: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Extract samples covering [t0, t1], interpolating the two endpoints."""
    t_us = np.asarray(t_us, dtype=np.int64)
    if t0_us < t_us[0] or t1_us > t_us[-1] or t1_us <= t0_us:
        raise EmptyInterval(f"[{t0_us}, {t1_us}] not covered by IMU stream")

    def sample_at(tq):
        i = int(np.searchsorted(t_us, tq))
        if i < t_us.size and t_us[i] == tq:
            return accel[i], gyro[i]
        lo, hi = i - 1, i
        f = (tq - t_us[lo]) / (t_us[hi] - t_us[lo])
        return (
            accel[lo] + f * (accel[hi] - accel[lo]),
            gyro[lo] + f * (gyro[hi] - gyro[lo]),
        )

    inner = (t_us > t0_us) & (t_us < t1_us)
    a0, g0 = sample_at(t0_us)
    a1, g1 = sample_at(t1_us)
    ts = np.concatenate([[t0_us], t_us[inner], [t1_us]])
    accs = np.vstack([a0, accel[inner], a1])
    gyrs = np.vstack([g0, gyro[inner], g1])
    return ts, accs, gyrs


def write_imu_csv(path, t_us: np.ndarray, accel: np.ndarray, gyro: np.ndarray) -> None:
    with open(path, "w") as f:
        f.write("t_us,ax,ay,az,gx,gy,gz\n")
        for i in range(len(t_us)):
            a, g = accel[i], gyro[i]
            f.write(
                f"{int(t_us[i])},{a[0]:.12g},{a[1]:.12g},{a[2]:.12g},"
                f"{g[0]:.12g},{g[1]:.12g},{g[2]:.12g}\n"
            )


def read_imu_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path) as f:
        header = f.readline().strip()
        if header != "t_us,ax,ay,az,gx,gy,gz":
            raise ValueError(f"unexpected IMU CSV header: {header!r}")
        rows = [line.split(",") for line in f if line.strip()]
    if not rows:
        return (np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros((0, 3)))
    arr = np.array(rows, dtype=np.float64)
    return arr[:, 0].astype(np.int64), arr[:, 1:4], arr[:, 4:7]

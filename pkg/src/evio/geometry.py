"""SE(3) poses, twists, and tangent-space operators.

Conventions used throughout the package:

* Quaternions are Hamilton, stored (w, x, y, z), kept unit-norm.
* A ``Pose`` maps points from its local frame into its parent frame:
  ``p_parent = R @ p_local + t``.
* Twists are 6-vectors ``[rho; phi]`` with the translational part first
  (meters, then radians).
* ``exp``/``log`` use the left-invariant convention
  ``exp(xi) = [Exp(phi), V(phi) @ rho]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Below this rotation angle exp/log switch to 2nd-order Taylor series.
SMALL_ANGLE = 1e-8


class AngleNearPi(Exception):
    """Rotation angle too close to pi; log() is ill-conditioned there."""


def _skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_rotvec(phi: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(phi))
    if angle < SMALL_ANGLE:
        # sin(a/2)/a ~ 1/2 - a^2/48, cos(a/2) ~ 1 - a^2/8
        v = phi * (0.5 - angle * angle / 48.0)
        w = 1.0 - angle * angle / 8.0
    else:
        v = phi * (np.sin(0.5 * angle) / angle)
        w = np.cos(0.5 * angle)
    q = np.array([w, v[0], v[1], v[2]])
    return q / np.linalg.norm(q)


def rotvec_from_quat(q: np.ndarray, max_angle: float = np.pi - 1e-6) -> np.ndarray:
    if q[0] < 0.0:
        q = -q
    vec_norm = float(np.linalg.norm(q[1:]))
    angle = 2.0 * np.arctan2(vec_norm, q[0])
    if angle >= max_angle:
        raise AngleNearPi(f"rotation angle {angle:.9f} rad too close to pi")
    if angle < SMALL_ANGLE:
        # phi = 2 v / w to second order
        return 2.0 * q[1:] * (1.0 + vec_norm * vec_norm / (3.0 * q[0] * q[0])) / q[0]
    return q[1:] * (angle / vec_norm)


def quat_rotate(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    # p' = p + 2 w (v x p) + 2 v x (v x p)
    v = q[1:]
    t = 2.0 * np.cross(v, p)
    return p + q[0] * t + np.cross(v, t)


# Below this angle the closed-form Jacobian coefficients lose precision to
# cancellation in (1 - cos); series truncation error there is < 1e-16.
_SERIES_ANGLE = 1e-2


def _so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(phi))
    S = _skew(phi)
    a2 = angle * angle
    if angle < _SERIES_ANGLE:
        c1 = 0.5 - a2 / 24.0 + a2 * a2 / 720.0
        c2 = 1.0 / 6.0 - a2 / 120.0 + a2 * a2 / 5040.0
    else:
        c1 = (1.0 - np.cos(angle)) / a2
        c2 = (angle - np.sin(angle)) / (a2 * angle)
    return np.eye(3) + c1 * S + c2 * (S @ S)


def _so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(phi))
    S = _skew(phi)
    a2 = angle * angle
    if angle < _SERIES_ANGLE:
        coeff = 1.0 / 12.0 + a2 / 720.0 + a2 * a2 / 30240.0
    else:
        coeff = (1.0 - 0.5 * angle * np.sin(angle) / (1.0 - np.cos(angle))) / a2
    return np.eye(3) - 0.5 * S + coeff * (S @ S)


@dataclass(frozen=True)
class Pose:
    """Rigid transform with unit quaternion (w,x,y,z) and translation (m).

    Immutable after construction; all operations return new values.
    """

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        q = q / np.linalg.norm(q)
        t = np.array(self.t, dtype=np.float64)
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_matrix(T: np.ndarray) -> "Pose":
        R = T[:3, :3]
        w = 0.5 * np.sqrt(max(0.0, 1.0 + R[0, 0] + R[1, 1] + R[2, 2]))
        if w > 1e-8:
            q = np.array(
                [
                    w,
                    (R[2, 1] - R[1, 2]) / (4 * w),
                    (R[0, 2] - R[2, 0]) / (4 * w),
                    (R[1, 0] - R[0, 1]) / (4 * w),
                ]
            )
        else:
            # near-pi rotation: pick the dominant diagonal axis
            i = int(np.argmax(np.diag(R)))
            j, k = (i + 1) % 3, (i + 2) % 3
            s = np.sqrt(max(0.0, 1.0 + R[i, i] - R[j, j] - R[k, k]))
            v = np.zeros(3)
            v[i] = 0.5 * s
            v[j] = (R[j, i] + R[i, j]) / (2 * s)
            v[k] = (R[k, i] + R[i, k]) / (2 * s)
            q = np.array([(R[k, j] - R[j, k]) / (2 * s), v[0], v[1], v[2]])
        return Pose(q, T[:3, 3])

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation_matrix()
        T[:3, 3] = self.t
        return T

    def compose(self, other: "Pose") -> "Pose":
        return Pose(
            quat_multiply(self.q, other.q), self.t + quat_rotate(self.q, other.t)
        )

    def __mul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        qinv = quat_conjugate(self.q)
        return Pose(qinv, -quat_rotate(qinv, self.t))

    def act(self, p: np.ndarray) -> np.ndarray:
        return quat_rotate(self.q, np.asarray(p, dtype=np.float64)) + self.t

    def adjoint(self) -> np.ndarray:
        """6x6 map with adjoint(P) @ xi = log(P * exp(xi) * P^-1) to 1st order."""
        R = self.rotation_matrix()
        A = np.zeros((6, 6))
        A[:3, :3] = R
        A[:3, 3:] = _skew(self.t) @ R
        A[3:, 3:] = R
        return A


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def inverse(a: Pose) -> Pose:
    return a.inverse()


def act(a: Pose, p: np.ndarray) -> np.ndarray:
    return a.act(p)


def adjoint(a: Pose) -> np.ndarray:
    return a.adjoint()


def exp(xi: np.ndarray) -> Pose:
    """Twist [rho; phi] -> Pose. Series expansion near zero, no division by 0."""
    xi = np.asarray(xi, dtype=np.float64)
    rho, phi = xi[:3], xi[3:]
    return Pose(quat_from_rotvec(phi), _so3_left_jacobian(phi) @ rho)


def log(pose: Pose) -> np.ndarray:
    """Pose -> twist [rho; phi]. Raises AngleNearPi within 1e-6 of pi."""
    phi = rotvec_from_quat(pose.q)
    rho = _so3_left_jacobian_inv(phi) @ pose.t
    return np.concatenate([rho, phi])


def se3_ad(xi: np.ndarray) -> np.ndarray:
    """Little adjoint ad(xi) with [ad(a), b] = ad(a) @ b for twists [rho; phi]."""
    rho, phi = xi[:3], xi[3:]
    A = np.zeros((6, 6))
    A[:3, :3] = _skew(phi)
    A[:3, 3:] = _skew(rho)
    A[3:, 3:] = _skew(phi)
    return A


def skew(v: np.ndarray) -> np.ndarray:
    return _skew(np.asarray(v, dtype=np.float64))


def so3_exp(phi: np.ndarray) -> np.ndarray:
    return quat_to_matrix(quat_from_rotvec(np.asarray(phi, dtype=np.float64)))


def so3_log(R: np.ndarray) -> np.ndarray:
    return rotvec_from_quat(Pose.from_matrix(np.vstack([np.hstack([R, np.zeros((3, 1))]), [[0, 0, 0, 1]]])).q)


def so3_right_jacobian(phi: np.ndarray) -> np.ndarray:
    """J_r with Exp(phi + d) ~ Exp(phi) Exp(J_r(phi) d)."""
    return _so3_left_jacobian(-np.asarray(phi, dtype=np.float64))

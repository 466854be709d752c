"""Synthetic world: spline trajectories, landmarks, event streams, IMU
samples, and an oracle correspondence provider with controllable noise.

Every synthetic quantity has a closed-form ground truth retrievable at any
timestamp; a fixed seed makes all outputs bit-reproducible.  The provider
stands in for the trained flow network: it emits, per patch-graph edge, the
2D flow vector that moves the patch center onto its true correspondence,
plus a per-axis confidence weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .geometry import Pose, so3_exp
from .imu import ImuNoise
from .patch_graph import GraphSnapshot, Intrinsics, MIN_DEPTH, backproject, project

DEFAULT_INTRINSICS = Intrinsics(fx=200.0, fy=200.0, cx=173.0, cy=130.0, width=346, height=260)

# camera mounting: body x forward, camera z forward / y down (level horizon)
R_CAM_LEVEL = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def _euler_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    return (
        so3_exp(np.array([0.0, 0.0, yaw]))
        @ so3_exp(np.array([0.0, pitch, 0.0]))
        @ so3_exp(np.array([roll, 0.0, 0.0]))
    )


def _euler_rates_to_body(yaw, pitch, roll, dyaw, dpitch, droll) -> np.ndarray:
    """Body angular velocity of R = Rz(yaw) Ry(pitch) Rx(roll)."""
    return np.array(
        [
            droll - dyaw * np.sin(pitch),
            dpitch * np.cos(roll) + dyaw * np.cos(pitch) * np.sin(roll),
            -dpitch * np.sin(roll) + dyaw * np.cos(pitch) * np.cos(roll),
        ]
    )


@dataclass(frozen=True)
class TrajectorySpline:
    """Twice-differentiable body trajectory: C2 cubic splines through
    waypoints for position and ZYX Euler angles, times in seconds."""

    pos: CubicSpline
    yaw: CubicSpline
    pitch: CubicSpline
    roll: CubicSpline
    mount: np.ndarray  # fixed body mounting rotation applied after the Eulers
    t_start_us: int
    t_end_us: int

    @staticmethod
    def from_waypoints(times_s, positions, yaws, pitches=None, rolls=None,
                       mount=None, bc_type="natural") -> "TrajectorySpline":
        times_s = np.asarray(times_s, dtype=np.float64)
        zeros = np.zeros_like(times_s)
        return TrajectorySpline(
            pos=CubicSpline(times_s, np.asarray(positions, dtype=np.float64), bc_type=bc_type),
            yaw=CubicSpline(times_s, np.asarray(yaws, dtype=np.float64), bc_type=bc_type),
            pitch=CubicSpline(times_s, zeros if pitches is None else np.asarray(pitches), bc_type=bc_type),
            roll=CubicSpline(times_s, zeros if rolls is None else np.asarray(rolls), bc_type=bc_type),
            mount=np.eye(3) if mount is None else mount,
            t_start_us=int(round(times_s[0] * 1e6)),
            t_end_us=int(round(times_s[-1] * 1e6)),
        )

    def rotation(self, t_us) -> np.ndarray:
        t = t_us * 1e-6
        return _euler_matrix(self.yaw(t), self.pitch(t), self.roll(t)) @ self.mount

    def pose(self, t_us) -> Pose:
        t = t_us * 1e-6
        T = np.eye(4)
        T[:3, :3] = self.rotation(t_us)
        T[:3, 3] = self.pos(t)
        return Pose.from_matrix(T)

    def velocity(self, t_us) -> np.ndarray:
        return self.pos(t_us * 1e-6, 1)

    def acceleration(self, t_us) -> np.ndarray:
        return self.pos(t_us * 1e-6, 2)

    def angular_velocity_body(self, t_us) -> np.ndarray:
        t = t_us * 1e-6
        w_euler = _euler_rates_to_body(
            self.yaw(t), self.pitch(t), self.roll(t),
            self.yaw(t, 1), self.pitch(t, 1), self.roll(t, 1),
        )
        return self.mount.T @ w_euler


@dataclass(frozen=True)
class Scenario:
    """Deterministic synthetic sequence description."""

    name: str
    trajectory: TrajectorySpline
    landmarks: np.ndarray  # (L, 3) world points
    intrinsics: Intrinsics
    extrinsics: Pose  # T^b_e, event camera in the body frame
    segment_dt_us: int
    n_segments: int
    imu_rate_hz: float
    imu_noise: ImuNoise
    imu_bias_a: np.ndarray
    imu_bias_g: np.ndarray
    events_per_pixel: float
    seed: int
    params: dict = field(default_factory=dict)

    def segment_time_us(self, segment: int) -> int:
        """Reference (end) timestamp of a segment's half-open interval."""
        return self.trajectory.t_start_us + (segment + 1) * self.segment_dt_us

    def body_pose(self, t_us) -> Pose:
        return self.trajectory.pose(t_us)

    def camera_pose(self, t_us) -> Pose:
        return self.trajectory.pose(t_us) * self.extrinsics

    def camera_pose_at_segment(self, segment: int) -> Pose:
        return self.camera_pose(self.segment_time_us(segment))

    def duration_us(self) -> int:
        return self.n_segments * self.segment_dt_us


# -- IMU synthesis --------------------------------------------------------------


def synthesize_imu(scenario: Scenario, rate_hz: float | None = None, noisy: bool = True):
    """Sample specific force and body rates along the trajectory.

    Returns (t_us, accel, gyro).  Specific force is R^T (a_w - g_w); noise
    and bias random walks follow the scenario's ImuNoise spec when enabled.
    """
    from .imu import gravity_world

    rate = float(rate_hz if rate_hz is not None else scenario.imu_rate_hz)
    if rate < 100.0:
        raise ValueError("IMU rate must be >= 100 Hz")
    traj = scenario.trajectory
    n = int(np.floor((traj.t_end_us - traj.t_start_us) * 1e-6 * rate)) + 1
    t_us = traj.t_start_us + np.round(np.arange(n) * 1e6 / rate).astype(np.int64)
    g_w = gravity_world()
    dt = 1.0 / rate

    accel = np.zeros((n, 3))
    gyro = np.zeros((n, 3))
    for k in range(n):
        R = traj.rotation(t_us[k])
        accel[k] = R.T @ (traj.acceleration(t_us[k]) - g_w)
        gyro[k] = traj.angular_velocity_body(t_us[k])

    accel += scenario.imu_bias_a
    gyro += scenario.imu_bias_g
    if noisy:
        rng = np.random.default_rng(np.random.SeedSequence([scenario.seed, 1]))
        nz = scenario.imu_noise
        accel += rng.normal(scale=nz.sigma_a * np.sqrt(rate), size=(n, 3))
        gyro += rng.normal(scale=nz.sigma_g * np.sqrt(rate), size=(n, 3))
        accel += np.cumsum(rng.normal(scale=nz.sigma_ba * np.sqrt(dt), size=(n, 3)), axis=0)
        gyro += np.cumsum(rng.normal(scale=nz.sigma_bg * np.sqrt(dt), size=(n, 3)), axis=0)
    return t_us, accel, gyro


# -- event synthesis ------------------------------------------------------------


def synthesize_events(scenario: Scenario, segment: int, substeps: int = 24) -> np.ndarray:
    """Emit events along each landmark's image track within one segment.

    The track is sampled at ``substeps`` points; events are placed at equal
    arc-length spacing (1/rate pixels), timestamps linearly interpolated,
    polarity from the horizontal image motion sign.  Static tracks emit
    nothing.  Returns an (N, 4) int64 event array sorted by time.
    """
    intr = scenario.intrinsics
    t0 = scenario.trajectory.t_start_us + segment * scenario.segment_dt_us
    t1 = t0 + scenario.segment_dt_us
    taus = np.linspace(t0, t1, substeps + 1)

    margin = 8.0
    w2c = [scenario.camera_pose(tau).inverse() for tau in taus]
    rows = []
    for lm in scenario.landmarks:
        uv = np.full((substeps + 1, 2), np.nan)
        for s, W in enumerate(w2c):
            p = W.act(lm)
            if p[2] > 0.1:
                pt = project(intr, p)
                if -margin <= pt[0] < intr.width + margin and -margin <= pt[1] < intr.height + margin:
                    uv[s] = pt
        both_valid = ~(np.isnan(uv[:-1]).any(axis=1) | np.isnan(uv[1:]).any(axis=1))
        seg_len = np.where(both_valid, np.nan_to_num(np.linalg.norm(np.diff(uv, axis=0), axis=1)), 0.0)
        total = float(seg_len.sum())
        n_events = int(np.floor(total * scenario.events_per_pixel))
        if n_events == 0:
            continue
        cum = np.concatenate([[0.0], np.cumsum(seg_len)])
        targets = (np.arange(n_events) + 0.5) / scenario.events_per_pixel
        idx = np.searchsorted(cum, targets, side="right") - 1
        idx = np.clip(idx, 0, substeps - 1)
        frac = (targets - cum[idx]) / np.maximum(seg_len[idx], 1e-12)
        for m in range(n_events):
            s = idx[m]
            if np.any(np.isnan(uv[s])) or np.any(np.isnan(uv[s + 1])):
                continue
            pt = uv[s] + frac[m] * (uv[s + 1] - uv[s])
            x, y = int(round(pt[0])), int(round(pt[1]))
            if not (0 <= x < intr.width and 0 <= y < intr.height):
                continue
            t_ev = int(round(taus[s] + frac[m] * (taus[s + 1] - taus[s])))
            t_ev = min(t_ev, int(t1) - 1)
            du = uv[s + 1, 0] - uv[s, 0]
            pol = 1 if du >= 0 else -1
            rows.append((t_ev, x, y, pol))
    if not rows:
        return np.zeros((0, 4), dtype=np.int64)
    ev = np.array(rows, dtype=np.int64)
    return ev[np.lexsort((ev[:, 3], ev[:, 2], ev[:, 1], ev[:, 0]))]


# -- oracle correspondence provider ---------------------------------------------


class OracleProvider:
    """Correspondence provider backed by scenario ground truth.

    Each patch is bound, on first sight, to a virtual scene point on its
    center ray at the depth of the nearest projected landmark.  Per edge the
    predicted flow is the true reprojection displacement plus N(0, sigma^2)
    per axis; confidence is 1/(sigma^2 + eps) for kept edges and 0 for
    dropped ones (drop fraction seeded).
    """

    WEIGHT_EPS = 1e-4

    def __init__(self, scenario: Scenario, sigma_px: float = 0.0, drop_rate: float = 0.0,
                 seed: int | None = None):
        self.scenario = scenario
        self.sigma_px = float(sigma_px)
        self.drop_rate = float(drop_rate)
        self.rng = np.random.default_rng(
            np.random.SeedSequence([scenario.seed if seed is None else seed, 2])
        )
        self._points: dict[tuple[int, int], np.ndarray | None] = {}
        self._proj_cache: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

    def _landmark_projections(self, segment: int):
        """Cached (uv, inv_depth, valid) of all landmarks in this segment."""
        if segment not in self._proj_cache:
            W = self.scenario.camera_pose_at_segment(segment).inverse()
            R, t = W.rotation_matrix(), W.t
            p = self.scenario.landmarks @ R.T + t
            valid = p[:, 2] > MIN_DEPTH
            z = np.where(valid, p[:, 2], 1.0)
            intr = self.scenario.intrinsics
            uv = np.stack(
                [intr.fx * p[:, 0] / z + intr.cx, intr.fy * p[:, 1] / z + intr.cy],
                axis=-1,
            )
            self._proj_cache[segment] = (uv, 1.0 / z, valid)
        return self._proj_cache[segment]

    def true_inverse_depth(self, segment: int, center: np.ndarray) -> float | None:
        """Camera-frame inverse depth of the landmark nearest in pixels."""
        uv, inv_z, valid = self._landmark_projections(segment)
        if not valid.any():
            return None
        d2 = np.where(valid, ((uv - np.asarray(center)) ** 2).sum(axis=1), np.inf)
        return float(inv_z[int(np.argmin(d2))])

    def _bind_patch(self, key: tuple[int, int], center: np.ndarray) -> None:
        segment = key[0]
        d = self.true_inverse_depth(segment, center)
        if d is None:
            self._points[key] = None
            return
        cam = self.scenario.camera_pose_at_segment(segment)
        self._points[key] = cam.act(backproject(self.scenario.intrinsics, center, d))

    def query(self, snap: GraphSnapshot) -> tuple[np.ndarray, np.ndarray]:
        intr = self.scenario.intrinsics
        for k, key in enumerate(snap.patch_keys):
            if key not in self._points:
                self._bind_patch(key, snap.centers[k])
        points = np.zeros((len(snap.patch_keys), 3))
        bound = np.zeros(len(snap.patch_keys), dtype=bool)
        for k, key in enumerate(snap.patch_keys):
            pt = self._points[key]
            if pt is not None:
                points[k] = pt
                bound[k] = True

        E = snap.n_edges
        delta = np.zeros((E, 2))
        weight = np.zeros((E, 2))
        noise = (
            self.rng.normal(scale=self.sigma_px, size=(E, 2)) if self.sigma_px > 0 else np.zeros((E, 2))
        )
        dropped = (
            self.rng.random(E) < self.drop_rate if self.drop_rate > 0 else np.zeros(E, dtype=bool)
        )
        w_kept = 1.0 / (self.sigma_px**2 + self.WEIGHT_EPS)

        X = points[snap.patch_local]
        keep = bound[snap.patch_local] & ~dropped
        for local_j, seg_j in enumerate(snap.frames):
            mask = keep & (snap.target_local == local_j)
            if not mask.any():
                continue
            W = self.scenario.camera_pose_at_segment(seg_j).inverse()
            p = X[mask] @ W.rotation_matrix().T + W.t
            ok = p[:, 2] > MIN_DEPTH
            z = np.where(ok, p[:, 2], 1.0)
            uv = np.stack(
                [intr.fx * p[:, 0] / z + intr.cx, intr.fy * p[:, 1] / z + intr.cy],
                axis=-1,
            )
            idx = np.nonzero(mask)[0][ok]
            delta[idx] = uv[ok] - snap.centers[snap.patch_local[idx]] + noise[idx]
            weight[idx] = w_kept
        return delta, weight

    def mean_flow_between(self, snap: GraphSnapshot, frame_i: int, frame_j: int) -> float:
        """Mean |delta| over edges from frame_i anchors into frame_j."""
        delta, weight = self.query(snap)
        mask = np.zeros(snap.n_edges, dtype=bool)
        for e in range(snap.n_edges):
            if (
                snap.frames[snap.anchor_local[e]] == frame_i
                and snap.frames[snap.target_local[e]] == frame_j
                and weight[e].max() > 0
            ):
                mask[e] = True
        if not mask.any():
            return 0.0
        return float(np.linalg.norm(delta[mask], axis=1).mean())


# -- scenario presets ------------------------------------------------------------


def _ring_landmarks(rng, count, radius_range, z_range, center=(0.0, 0.0)):
    ang = rng.uniform(0, 2 * np.pi, count)
    rad = rng.uniform(*radius_range, count)
    z = rng.uniform(*z_range, count)
    return np.column_stack([center[0] + rad * np.cos(ang), center[1] + rad * np.sin(ang), z])


def make_circle_scenario(
    seed: int = 0,
    n_segments: int = 120,
    segment_dt_us: int = 33_300,
    radius: float = 2.0,
    base_rate: float = 1.3,
    rate_wobble: float = 0.9,
    imu_noise: ImuNoise = ImuNoise(),
    noisy_bias: bool = False,
    events_per_pixel: float = 2.0,
    n_landmarks: int = 80,
) -> Scenario:
    """Orbit with modulated angular rate (gyro variance above the excitation
    gate) and an outward-looking camera on a landmark ring."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    duration = (n_segments + 2) * segment_dt_us * 1e-6
    wp_t = np.linspace(0.0, duration, max(64, int(duration * 40)))
    wobble_period = 2.2
    phase = base_rate * wp_t - rate_wobble * wobble_period / (2 * np.pi) * np.cos(
        2 * np.pi * wp_t / wobble_period
    )
    pos = np.column_stack([radius * np.cos(phase), radius * np.sin(phase), 1.5 + 0.1 * np.sin(phase)])
    yaw = phase  # camera forward stays radial
    traj = TrajectorySpline.from_waypoints(wp_t, pos, yaw, mount=R_CAM_LEVEL)
    landmarks = _ring_landmarks(rng, n_landmarks, (5.0, 8.0), (0.0, 3.0))
    bias_a = rng.normal(scale=0.02, size=3) if noisy_bias else np.zeros(3)
    bias_g = rng.normal(scale=0.002, size=3) if noisy_bias else np.zeros(3)
    return Scenario(
        name="circle",
        trajectory=traj,
        landmarks=landmarks,
        intrinsics=DEFAULT_INTRINSICS,
        extrinsics=Pose.identity(),
        segment_dt_us=segment_dt_us,
        n_segments=n_segments,
        imu_rate_hz=1000.0,
        imu_noise=imu_noise,
        imu_bias_a=bias_a,
        imu_bias_g=bias_g,
        events_per_pixel=events_per_pixel,
        seed=seed,
        params={"radius": radius, "base_rate": base_rate, "rate_wobble": rate_wobble},
    )


def make_figure_eight_scenario(
    seed: int = 0,
    n_segments: int = 200,
    segment_dt_us: int = 33_300,
    amplitude: float = 2.0,
    period_s: float = 6.0,
    imu_noise: ImuNoise = ImuNoise(),
    noisy_bias: bool = False,
    events_per_pixel: float = 2.0,
    n_landmarks: int = 90,
) -> Scenario:
    """Lissajous figure-eight with oscillating yaw (yaw excitation) facing a
    landmark wall."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    duration = (n_segments + 2) * segment_dt_us * 1e-6
    wp_t = np.linspace(0.0, duration, max(64, int(duration * 40)))
    om = 2 * np.pi / period_s
    pos = np.column_stack(
        [
            amplitude * np.sin(om * wp_t),
            0.5 * amplitude * np.sin(2 * om * wp_t),
            1.5 + 0.15 * np.sin(om * wp_t + 0.7),
        ]
    )
    yaw = 1.05 * np.sin(om * wp_t)  # peak rate ~1.1 rad/s: admission + excitation
    traj = TrajectorySpline.from_waypoints(wp_t, pos, yaw, mount=R_CAM_LEVEL)
    # landmark wall ahead of the oscillating gaze sector (+x side)
    landmarks = np.column_stack(
        [
            rng.uniform(6.0, 9.0, n_landmarks),
            rng.uniform(-6.0, 6.0, n_landmarks),
            rng.uniform(-0.5, 3.5, n_landmarks),
        ]
    )
    bias_a = rng.normal(scale=0.02, size=3) if noisy_bias else np.zeros(3)
    bias_g = rng.normal(scale=0.002, size=3) if noisy_bias else np.zeros(3)
    return Scenario(
        name="figure8",
        trajectory=traj,
        landmarks=landmarks,
        intrinsics=DEFAULT_INTRINSICS,
        extrinsics=Pose.identity(),
        segment_dt_us=segment_dt_us,
        n_segments=n_segments,
        imu_rate_hz=1000.0,
        imu_noise=imu_noise,
        imu_bias_a=bias_a,
        imu_bias_g=bias_g,
        events_per_pixel=events_per_pixel,
        seed=seed,
        params={"amplitude": amplitude, "period_s": period_s},
    )


def make_line_scenario(
    seed: int = 0,
    n_segments: int = 90,
    segment_dt_us: int = 33_300,
    speed: float = 2.5,
    imu_noise: ImuNoise = ImuNoise(),
    events_per_pixel: float = 2.0,
    n_landmarks: int = 60,
) -> Scenario:
    """Constant-velocity straight line: degenerate IMU excitation (gyro
    variance zero) that must keep the initializer waiting."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    duration = (n_segments + 2) * segment_dt_us * 1e-6
    wp_t = np.linspace(0.0, duration, 64)
    pos = np.column_stack([speed * wp_t, np.zeros_like(wp_t), np.full_like(wp_t, 1.5)])
    # camera looks +y (left of travel) at landmarks beside the path
    yaw = np.full_like(wp_t, np.pi / 2)
    traj = TrajectorySpline.from_waypoints(wp_t, pos, yaw, mount=R_CAM_LEVEL)
    landmarks = np.column_stack(
        [
            rng.uniform(0.0, speed * duration + 4.0, n_landmarks),
            rng.uniform(2.5, 6.0, n_landmarks),
            rng.uniform(0.0, 3.0, n_landmarks),
        ]
    )
    return Scenario(
        name="line",
        trajectory=traj,
        landmarks=landmarks,
        intrinsics=DEFAULT_INTRINSICS,
        extrinsics=Pose.identity(),
        segment_dt_us=segment_dt_us,
        n_segments=n_segments,
        imu_rate_hz=1000.0,
        imu_noise=imu_noise,
        imu_bias_a=np.zeros(3),
        imu_bias_g=np.zeros(3),
        events_per_pixel=events_per_pixel,
        seed=seed,
        params={"speed": speed},
    )


def make_static_scenario(
    seed: int = 0,
    n_segments: int = 30,
    segment_dt_us: int = 33_300,
    imu_noise: ImuNoise = ImuNoise(),
    n_landmarks: int = 40,
) -> Scenario:
    """No motion at all: the event camera stays silent and initialization
    must reject every segment."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    duration = (n_segments + 2) * segment_dt_us * 1e-6
    wp_t = np.linspace(0.0, duration, 16)
    pos = np.tile([0.0, 0.0, 1.5], (wp_t.size, 1))
    traj = TrajectorySpline.from_waypoints(wp_t, pos, np.zeros_like(wp_t), mount=R_CAM_LEVEL)
    landmarks = np.column_stack(
        [rng.uniform(4.0, 7.0, n_landmarks), rng.uniform(-3.0, 3.0, n_landmarks), rng.uniform(0.0, 3.0, n_landmarks)]
    )
    return Scenario(
        name="static",
        trajectory=traj,
        landmarks=landmarks,
        intrinsics=DEFAULT_INTRINSICS,
        extrinsics=Pose.identity(),
        segment_dt_us=segment_dt_us,
        n_segments=n_segments,
        imu_rate_hz=1000.0,
        imu_noise=imu_noise,
        imu_bias_a=np.zeros(3),
        imu_bias_g=np.zeros(3),
        events_per_pixel=2.0,
        seed=seed,
        params={},
    )


SCENARIO_MAKERS = {
    "circle": make_circle_scenario,
    "figure8": make_figure_eight_scenario,
    "line": make_line_scenario,
    "static": make_static_scenario,
}


def make_scenario(kind: str, **kwargs) -> Scenario:
    if kind not in SCENARIO_MAKERS:
        raise KeyError(f"unknown scenario kind {kind!r}; have {sorted(SCENARIO_MAKERS)}")
    return SCENARIO_MAKERS[kind](**kwargs)


def write_tum(path, t_us: np.ndarray, poses: list[Pose]) -> None:
    """TUM trajectory format: `timestamp tx ty tz qx qy qz qw` (seconds)."""
    with open(path, "w") as f:
        for t, pose in zip(t_us, poses):
            q, p = pose.q, pose.t
            f.write(
                f"{t * 1e-6:.9f} {p[0]:.9f} {p[1]:.9f} {p[2]:.9f} "
                f"{q[1]:.9f} {q[2]:.9f} {q[3]:.9f} {q[0]:.9f}\n"
            )


def read_tum(path) -> tuple[np.ndarray, list[Pose]]:
    times = []
    poses = []
    with open(path) as f:
        for line in f:
            if not line.strip() or line.startswith("#"):
                continue
            vals = [float(x) for x in line.split()]
            times.append(int(round(vals[0] * 1e6)))
            q = np.array([vals[7], vals[4], vals[5], vals[6]])
            poses.append(Pose(q, np.array(vals[1:4])))
    return np.array(times, dtype=np.int64), poses


def ground_truth_tum(scenario: Scenario, path) -> None:
    times = [scenario.segment_time_us(i) for i in range(scenario.n_segments)]
    poses = [scenario.body_pose(t) for t in times]
    write_tum(path, np.array(times), poses)

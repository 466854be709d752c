"""Trajectory alignment and accuracy metrics.

Supports the three alignment protocols used for reporting: rigid SE(3),
similarity Sim(3), and SE(3) fitted on the first 5 seconds only.  Metrics
are ATE-RMSE (meters), MPE (mean position error as a percentage of the
ground-truth traveled distance), and per-axis RMS errors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ASSOCIATION_MAX_DT_US = 10_000  # 10 ms
FIRST_WINDOW_US = 5_000_000  # "first 5 seconds" protocol

ALIGN_MODES = ("se3", "sim3", "first5s")


class NoOverlap(Exception):
    """No estimate/ground-truth timestamp pairs within the association gate."""


def associate(t_est_us: np.ndarray, t_gt_us: np.ndarray, max_dt_us: int = ASSOCIATION_MAX_DT_US):
    """Greedy nearest-neighbor timestamp association within max_dt.

    Returns (idx_est, idx_gt) index arrays, each trajectory entry used at
    most once, closest pairs claimed first.
    """
    t_est_us = np.asarray(t_est_us, dtype=np.int64)
    t_gt_us = np.asarray(t_gt_us, dtype=np.int64)
    cands = []
    for i, t in enumerate(t_est_us):
        j = int(np.searchsorted(t_gt_us, t))
        for jj in (j - 1, j):
            if 0 <= jj < t_gt_us.size:
                dt = abs(int(t) - int(t_gt_us[jj]))
                if dt <= max_dt_us:
                    cands.append((dt, i, jj))
    cands.sort()
    used_i, used_j = set(), set()
    pairs = []
    for dt, i, j in cands:
        if i in used_i or j in used_j:
            continue
        used_i.add(i)
        used_j.add(j)
        pairs.append((i, j))
    if not pairs:
        raise NoOverlap("no timestamps within the association gate")
    pairs.sort()
    idx = np.array(pairs, dtype=np.int64)
    return idx[:, 0], idx[:, 1]


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool):
    """Closed-form least-squares fit of dst ~ s R src + t.

    Returns (s, R, t); s is fixed to 1 when with_scale is False.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / src.shape[0]
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_s = (xs * xs).sum() / src.shape[0]
        s = float(np.trace(np.diag(D) @ S) / var_s)
    else:
        s = 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def align_positions(
    est_pos: np.ndarray,
    gt_pos: np.ndarray,
    mode: str,
    t_us: np.ndarray | None = None,
):
    """Fit the chosen alignment on (est, gt) pairs and apply it to est.

    ``first5s`` fits a rigid transform using only pairs within 5 s of the
    first associated timestamp (t_us required), then applies it globally.
    """
    if mode not in ALIGN_MODES:
        raise ValueError(f"alignment mode must be one of {ALIGN_MODES}")
    if mode == "first5s":
        if t_us is None:
            raise ValueError("first5s alignment needs timestamps")
        sel = t_us <= t_us[0] + FIRST_WINDOW_US
        if sel.sum() < 3:
            sel = np.ones(len(est_pos), dtype=bool)
        s, R, t = umeyama(est_pos[sel], gt_pos[sel], with_scale=False)
    else:
        s, R, t = umeyama(est_pos, gt_pos, with_scale=(mode == "sim3"))
    return est_pos @ (s * R).T + t, (s, R, t)


def path_length(pos: np.ndarray) -> float:
    return float(np.linalg.norm(np.diff(pos, axis=0), axis=1).sum())


@dataclass(frozen=True)
class TrajectoryMetrics:
    ate_rmse_m: float
    mpe_percent: float
    rms_per_axis_m: tuple[float, float, float]
    n_pairs: int
    align_mode: str
    scale: float

    def lines(self) -> list[str]:
        return [
            f"pairs          : {self.n_pairs}",
            f"alignment      : {self.align_mode} (scale {self.scale:.6f})",
            f"ATE-RMSE [m]   : {self.ate_rmse_m:.6f}",
            f"MPE [%]        : {self.mpe_percent:.6f}",
            "RMS x/y/z [m]  : "
            + " ".join(f"{v:.6f}" for v in self.rms_per_axis_m),
        ]


def evaluate_trajectories(
    t_est_us: np.ndarray,
    est_pos: np.ndarray,
    t_gt_us: np.ndarray,
    gt_pos: np.ndarray,
    mode: str = "se3",
    max_dt_us: int = ASSOCIATION_MAX_DT_US,
) -> TrajectoryMetrics:
    ie, ig = associate(t_est_us, t_gt_us, max_dt_us)
    est = np.asarray(est_pos, dtype=np.float64)[ie]
    gt = np.asarray(gt_pos, dtype=np.float64)[ig]
    aligned, (s, _, _) = align_positions(est, gt, mode, t_us=np.asarray(t_est_us)[ie])
    err = aligned - gt
    dists = np.linalg.norm(err, axis=1)
    ate = float(np.sqrt((dists**2).mean()))
    plen = path_length(gt)
    mpe = float(dists.mean() / plen * 100.0) if plen > 0 else float("inf")
    per_axis = tuple(float(np.sqrt((err[:, k] ** 2).mean())) for k in range(3))
    return TrajectoryMetrics(
        ate_rmse_m=ate,
        mpe_percent=mpe,
        rms_per_axis_m=per_axis,
        n_pairs=len(ie),
        align_mode=mode,
        scale=float(s),
    )

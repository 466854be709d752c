"""Bundle-adjustment linear algebra over the patch graph.

The residual of an edge ``[(i, n), j]`` compares the warped patch center
against the predicted correspondence::

    F = project(T_ji @ backproject(center, d)) - (center + delta)

Unknowns are per-frame twists (left increments on the world-to-camera poses)
plus one inverse depth per patch.  Per-edge Jacobians are chain-ruled into
the two incident frames via the adjoint of T_ji.  Eliminating the depth
block with the Schur complement yields the reduced interframe pose
constraint ``(H_g, V_g)`` consumed by the sliding-window backend.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import Pose, exp, skew
from .patch_graph import (
    GraphSnapshot,
    Intrinsics,
    MIN_DEPTH,
    PatchGraph,
    apply_update,
    snapshot,
)
from .patch_graph import BehindCamera

DAMPING = 1e-4


class SolveFailure(Exception):
    """Reduced pose system is numerically singular after gauge fixing."""


@dataclass(frozen=True)
class NormalEquations:
    """Block system [[B, E], [E^T, diag(C)]] [xi; dd] = [v; u].

    B is 6K x 6K over frame twists, C is the per-patch depth diagonal
    (already damped), E couples them.  ``frames``/``patch_keys`` record the
    orderings the blocks were assembled in.
    """

    B: np.ndarray
    E: np.ndarray
    C: np.ndarray  # diagonal entries, (P,)
    v: np.ndarray
    u: np.ndarray
    frames: tuple[int, ...]
    patch_keys: tuple[tuple[int, int], ...]
    damping: float


@dataclass(frozen=True)
class EventHessianFactor:
    """Reduced interframe pose constraint: 0.5 xi^T H_g xi - xi^T V_g."""

    H_g: np.ndarray  # 6K x 6K
    V_g: np.ndarray  # 6K
    frames: tuple[int, ...]


def warp_center(
    center: np.ndarray, inv_depth: float, T_ji: Pose, intr: Intrinsics
) -> np.ndarray:
    """Patch center -> 3D point in the target camera frame."""
    x_unit = np.array(
        [(center[0] - intr.cx) / intr.fx, (center[1] - intr.cy) / intr.fy, 1.0]
    )
    return T_ji.act(x_unit / inv_depth)


def residual(
    center: np.ndarray,
    inv_depth: float,
    T_ji: Pose,
    intr: Intrinsics,
    delta: np.ndarray,
) -> np.ndarray:
    p = warp_center(center, inv_depth, T_ji, intr)
    if p[2] <= MIN_DEPTH:
        raise BehindCamera(f"warped depth {p[2]:.3g} m")
    proj = np.array([intr.fx * p[0] / p[2] + intr.cx, intr.fy * p[1] / p[2] + intr.cy])
    return proj - (np.asarray(center, dtype=np.float64) + np.asarray(delta))


def _proj_jacobian(p: np.ndarray, intr: Intrinsics) -> np.ndarray:
    x, y, z = p
    return np.array(
        [
            [intr.fx / z, 0.0, -intr.fx * x / (z * z)],
            [0.0, intr.fy / z, -intr.fy * y / (z * z)],
        ]
    )


def jacobian_pose(
    center: np.ndarray, inv_depth: float, T_ji: Pose, intr: Intrinsics
) -> np.ndarray:
    """2x6 derivative of the residual wrt a left increment on T_ji,
    column order [translation; rotation]."""
    p = warp_center(center, inv_depth, T_ji, intr)
    if p[2] <= MIN_DEPTH:
        raise BehindCamera(f"warped depth {p[2]:.3g} m")
    Jp = _proj_jacobian(p, intr)
    return np.hstack([Jp, -Jp @ skew(p)])


def jacobian_depth(
    center: np.ndarray, inv_depth: float, T_ji: Pose, intr: Intrinsics
) -> np.ndarray:
    """2-vector derivative of the residual wrt the patch inverse depth."""
    p = warp_center(center, inv_depth, T_ji, intr)
    if p[2] <= MIN_DEPTH:
        raise BehindCamera(f"warped depth {p[2]:.3g} m")
    Jp = _proj_jacobian(p, intr)
    return Jp @ ((T_ji.t - p) / inv_depth)


def _edge_geometry(snap: GraphSnapshot):
    """Vectorized warp of every edge; returns residual pieces and validity."""
    K = len(snap.frames)
    T_c2w = np.stack([p.matrix() for p in snap.poses])
    T_w2c = np.stack([p.inverse().matrix() for p in snap.poses])
    # relative transforms for every (anchor, target) frame pair
    T_rel = np.einsum("bij,ajk->abik", T_w2c, T_c2w)  # [a, b] = W_b @ T_a

    intr = snap.intrinsics
    a, b, pidx = snap.anchor_local, snap.target_local, snap.patch_local
    d = snap.inv_depth[pidx]
    x_unit = np.stack(
        [
            (snap.centers[pidx, 0] - intr.cx) / intr.fx,
            (snap.centers[pidx, 1] - intr.cy) / intr.fy,
            np.ones(len(pidx)),
        ],
        axis=-1,
    )
    R_ji = T_rel[a, b, :3, :3]
    t_ji = T_rel[a, b, :3, 3]
    p_j = np.einsum("eij,ej->ei", R_ji, x_unit) / d[:, None] + t_ji
    valid = p_j[:, 2] > MIN_DEPTH
    z = np.where(valid, p_j[:, 2], 1.0)
    proj = np.stack(
        [intr.fx * p_j[:, 0] / z + intr.cx, intr.fy * p_j[:, 1] / z + intr.cy], axis=-1
    )
    res = proj - (snap.centers[pidx] + snap.delta)
    return T_rel, p_j, t_ji, d, res, valid, z


def build_normal_equations(
    snap: GraphSnapshot, damping: float = DAMPING, huber_delta: float | None = None
) -> NormalEquations:
    """Accumulate per-edge J^T W J and -J^T W F into the block system.

    Edges whose warped center falls behind the target camera are
    down-weighted to zero confidence.  C receives additive damping.
    Assembly runs in the snapshot's fixed edge order and is deterministic.
    """
    K = len(snap.frames)
    P = len(snap.patch_keys)
    intr = snap.intrinsics
    nb = 6 * K

    B = np.zeros((K, K, 6, 6))
    E = np.zeros((K, P, 6))
    C = np.zeros(P)
    v = np.zeros((K, 6))
    u = np.zeros(P)

    if snap.n_edges:
        T_rel, p_j, t_ji, d, res, valid, z = _edge_geometry(snap)
        w = snap.weight * valid[:, None]

        if huber_delta is not None:
            # IRLS-style reweighting on the weighted residual norm
            rn = np.sqrt(np.maximum((w * res * res).sum(axis=1), 1e-30))
            w = w * np.minimum(1.0, huber_delta / rn)[:, None]

        x, y = p_j[:, 0], p_j[:, 1]
        zero = np.zeros_like(z)
        Jp = np.stack(
            [
                np.stack([intr.fx / z, zero, -intr.fx * x / (z * z)], axis=-1),
                np.stack([zero, intr.fy / z, -intr.fy * y / (z * z)], axis=-1),
            ],
            axis=1,
        )  # (E, 2, 3)
        S = np.zeros((len(z), 3, 3))
        S[:, 0, 1], S[:, 0, 2] = -p_j[:, 2], p_j[:, 1]
        S[:, 1, 0], S[:, 1, 2] = p_j[:, 2], -p_j[:, 0]
        S[:, 2, 0], S[:, 2, 1] = -p_j[:, 1], p_j[:, 0]
        Jj = np.concatenate([Jp, -np.einsum("eij,ejk->eik", Jp, S)], axis=-1)  # (E,2,6)

        a, b, pidx = snap.anchor_local, snap.target_local, snap.patch_local
        Ad = _adjoint_batch(T_rel[a, b])
        Ji = -np.einsum("eij,ejk->eik", Jj, Ad)
        Jd = np.einsum("eij,ej->ei", Jp, (t_ji - p_j) / d[:, None])  # (E, 2)

        def block(Ja, Jb):
            return np.einsum("eki,ek,ekj->eij", Ja, w, Jb)

        np.add.at(B, (a, a), block(Ji, Ji))
        np.add.at(B, (b, b), block(Jj, Jj))
        Hij = block(Ji, Jj)
        np.add.at(B, (a, b), Hij)
        np.add.at(B, (b, a), Hij.transpose(0, 2, 1))

        np.add.at(E, (a, pidx), np.einsum("eki,ek,ek->ei", Ji, w, Jd))
        np.add.at(E, (b, pidx), np.einsum("eki,ek,ek->ei", Jj, w, Jd))
        np.add.at(C, pidx, np.einsum("ek,ek->e", w, Jd * Jd))
        np.add.at(v, a, -np.einsum("eki,ek,ek->ei", Ji, w, res))
        np.add.at(v, b, -np.einsum("eki,ek,ek->ei", Jj, w, res))
        np.add.at(u, pidx, -np.einsum("ek,ek->e", w, Jd * res))

    B_flat = B.transpose(0, 2, 1, 3).reshape(nb, nb)
    B_flat = 0.5 * (B_flat + B_flat.T)  # exact symmetry despite einsum round-off
    return NormalEquations(
        B=B_flat,
        E=E.transpose(0, 2, 1).reshape(nb, P),
        C=C + damping,
        v=v.reshape(nb),
        u=u,
        frames=snap.frames,
        patch_keys=snap.patch_keys,
        damping=damping,
    )


def _adjoint_batch(T: np.ndarray) -> np.ndarray:
    """Adjoints of a batch of 4x4 transforms, twist order [rho; phi]."""
    n = T.shape[0]
    R = T[:, :3, :3]
    t = T[:, :3, 3]
    S = np.zeros((n, 3, 3))
    S[:, 0, 1], S[:, 0, 2] = -t[:, 2], t[:, 1]
    S[:, 1, 0], S[:, 1, 2] = t[:, 2], -t[:, 0]
    S[:, 2, 0], S[:, 2, 1] = -t[:, 1], t[:, 0]
    A = np.zeros((n, 6, 6))
    A[:, :3, :3] = R
    A[:, :3, 3:] = np.einsum("nij,njk->nik", S, R)
    A[:, 3:, 3:] = R
    return A


def schur_reduce(ne: NormalEquations) -> EventHessianFactor:
    """Eliminate depths: H_g = B - E C^-1 E^T, V_g = v - E C^-1 u."""
    Es = ne.E / np.sqrt(ne.C)[None, :]
    H_g = ne.B - Es @ Es.T
    V_g = ne.v - ne.E @ (ne.u / ne.C)
    return EventHessianFactor(H_g=H_g, V_g=V_g, frames=ne.frames)


def update_depths(ne: NormalEquations, xi: np.ndarray) -> np.ndarray:
    """Back-substitute pose increments: dd = C^-1 (u - E^T xi)."""
    return (ne.u - ne.E.T @ xi.reshape(-1)) / ne.C


def solve_pose_system(
    factor: EventHessianFactor, anchor_first: bool = True
) -> np.ndarray:
    """Solve H_g xi = V_g, optionally freezing the first frame (gauge)."""
    n = factor.H_g.shape[0]
    start = 6 if anchor_first else 0
    H = factor.H_g[start:, start:]
    V = factor.V_g[start:]
    xi = np.zeros(n)
    if H.size == 0:
        return xi
    if not np.any(H) and not np.any(V):
        return xi  # no information, no update
    try:
        L = np.linalg.cholesky(H)
        xi[start:] = np.linalg.solve(L.T, np.linalg.solve(L, V))
    except np.linalg.LinAlgError as err:
        raise SolveFailure("reduced pose system singular after anchoring") from err
    return xi


def weighted_cost(snap: GraphSnapshot) -> float:
    """Total Mahalanobis cost of the current snapshot under its flows."""
    if snap.n_edges == 0:
        return 0.0
    _, _, _, _, res, valid, _ = _edge_geometry(snap)
    w = snap.weight * valid[:, None]
    return float((w * res * res).sum())


def _retract(snap: GraphSnapshot, xi: np.ndarray, dd: np.ndarray) -> GraphSnapshot:
    from .patch_graph import INV_DEPTH_MIN, INV_DEPTH_MAX

    poses = []
    for k, pose in enumerate(snap.poses):
        poses.append(pose * exp(-xi[6 * k : 6 * k + 6]))
    inv_depth = np.clip(snap.inv_depth + dd, INV_DEPTH_MIN, INV_DEPTH_MAX)
    return replace(snap, poses=tuple(poses), inv_depth=inv_depth)


def ba_step(
    snap: GraphSnapshot,
    damping: float = DAMPING,
    anchor_first: bool = True,
    max_backtracks: int = 8,
) -> tuple[GraphSnapshot, np.ndarray, float, bool]:
    """One Gauss-Newton step with backtracking so accepted steps never
    increase the weighted cost.  Returns (snapshot, xi, cost, accepted)."""
    ne = build_normal_equations(snap, damping=damping)
    factor = schur_reduce(ne)
    xi = solve_pose_system(factor, anchor_first=anchor_first)
    cost0 = weighted_cost(snap)
    alpha = 1.0
    for _ in range(max_backtracks + 1):
        xi_a = alpha * xi
        dd = update_depths(ne, xi_a)
        cand = _retract(snap, xi_a, dd)
        cost1 = weighted_cost(cand)
        if cost1 <= cost0 or not np.any(xi):
            return cand, xi_a, cost1, True
        alpha *= 0.5
    return snap, np.zeros_like(xi), cost0, False


def ba_iterate(
    graph: PatchGraph,
    provider,
    n_iters: int,
    damping: float = DAMPING,
    anchor_first: bool = True,
) -> float:
    """Run n_iters Gauss-Newton iterations with flows re-queried each pass.

    The provider fills (delta, weight) for every snapshot edge.  The first
    window pose is frozen as the gauge anchor; global scale is left free.
    Returns the final weighted cost.
    """
    if len(graph.window) < 2:
        raise ValueError("need at least 2 frames")
    cost = float("nan")
    for _ in range(n_iters):
        snap = snapshot(graph)
        delta, weight = provider.query(snap)
        for e, ek in enumerate(sorted(graph.edges.keys())):
            graph.edges[ek].flow_delta = delta[e].copy()
            graph.edges[ek].confidence = weight[e].copy()
        snap = replace(snap, delta=delta, weight=weight)
        new_snap, _, cost, accepted = ba_step(
            snap, damping=damping, anchor_first=anchor_first
        )
        if accepted:
            apply_update(graph, snap, new_poses=list(new_snap.poses))
            for k, key in enumerate(snap.patch_keys):
                graph.patches[key].inv_depth = float(new_snap.inv_depth[k])
    return cost


def dump_normal_equations(ne: NormalEquations, path) -> None:
    """Binary dump: int64 header [6K, P], then B, E, C, v, u as row-major
    float64 in that order."""
    nb = ne.B.shape[0]
    P = ne.C.shape[0]
    with open(path, "wb") as f:
        np.array([nb, P], dtype=np.int64).tofile(f)
        for arr in (ne.B, ne.E, ne.C, ne.v, ne.u):
            np.ascontiguousarray(arr, dtype=np.float64).tofile(f)


def load_normal_equations(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    with open(path, "rb") as f:
        nb, P = np.fromfile(f, dtype=np.int64, count=2)
        B = np.fromfile(f, dtype=np.float64, count=nb * nb).reshape(nb, nb)
        E = np.fromfile(f, dtype=np.float64, count=nb * P).reshape(nb, P)
        C = np.fromfile(f, dtype=np.float64, count=P)
        v = np.fromfile(f, dtype=np.float64, count=nb)
        u = np.fromfile(f, dtype=np.float64, count=P)
    return B, E, C, v, u

import numpy as np
import pytest

from evio import dba
from evio.dba import (
    EventHessianFactor,
    NormalEquations,
    build_normal_equations,
    dump_normal_equations,
    jacobian_depth,
    jacobian_pose,
    load_normal_equations,
    residual,
    schur_reduce,
    solve_pose_system,
    update_depths,
)
from evio.geometry import Pose, exp
from evio.patch_graph import BehindCamera, GraphSnapshot, Intrinsics

INTR = Intrinsics(fx=200.0, fy=210.0, cx=173.0, cy=130.0, width=346, height=260)
UNIT_INTR = Intrinsics(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=2, height=2)


def random_edge_state(rng, intr=INTR):
    center = np.array(
        [rng.uniform(30, intr.width - 30), rng.uniform(30, intr.height - 30)]
    )
    d = rng.uniform(0.2, 2.0)
    T_ji = exp(rng.normal(scale=0.15, size=6))
    return center, d, T_ji


# -- residual -----------------------------------------------------------------


def test_residual_zero_at_identity_static():
    center = np.array([100.0, 80.0])
    r = residual(center, 0.7, Pose.identity(), INTR, np.zeros(2))
    assert np.allclose(r, 0, atol=1e-12)


def test_residual_linear_in_delta():
    rng = np.random.default_rng(0)
    center, d, T_ji = random_edge_state(rng)
    base = residual(center, d, T_ji, INTR, np.zeros(2))
    shifted = residual(center, d, T_ji, INTR, np.array([1.0, 0.0]))
    assert np.allclose(shifted, base - [1.0, 0.0], atol=1e-12)


def test_residual_behind_camera_propagates():
    with pytest.raises(BehindCamera):
        residual(np.array([173.0, 130.0]), 1.0, Pose(np.array([1.0, 0, 0, 0]), np.array([0, 0, -1.5])), INTR, np.zeros(2))


# -- pose jacobian ------------------------------------------------------------


def test_jacobian_pose_principal_point_unit_depth():
    # fx=fy=1, warped point on the optical axis at unit depth, d=1
    J = jacobian_pose(np.array([0.0, 0.0]), 1.0, Pose.identity(), UNIT_INTR)
    assert np.allclose(J, [[1, 0, 0, 0, 1, 0], [0, 1, 0, -1, 0, 0]], atol=1e-12)


def test_jacobian_pose_entry_scaling_with_depth():
    # doubling the warped depth with x=y=0 halves the (1,1) entry
    J1 = jacobian_pose(np.array([0.0, 0.0]), 1.0, Pose.identity(), UNIT_INTR)
    J2 = jacobian_pose(
        np.array([0.0, 0.0]), 1.0, Pose(np.array([1.0, 0, 0, 0]), np.array([0, 0, 1.0])), UNIT_INTR
    )
    assert J2[0, 0] == pytest.approx(0.5 * J1[0, 0])


def fd_pose_jacobian(center, d, T_ji, intr, delta, eps=1e-6):
    J = np.zeros((2, 6))
    for k in range(6):
        e = np.zeros(6)
        e[k] = eps
        hi = residual(center, d, exp(e) * T_ji, intr, delta)
        lo = residual(center, d, exp(-e) * T_ji, intr, delta)
        J[:, k] = (hi - lo) / (2 * eps)
    return J


def test_jacobian_pose_matches_finite_differences():
    rng = np.random.default_rng(1)
    checked = 0
    while checked < 20:
        center, d, T_ji = random_edge_state(rng)
        try:
            J = jacobian_pose(center, d, T_ji, INTR)
            fd = fd_pose_jacobian(center, d, T_ji, INTR, np.zeros(2))
        except BehindCamera:
            continue
        assert np.allclose(J, fd, rtol=1e-5, atol=1e-7)
        checked += 1


# -- depth jacobian -----------------------------------------------------------


def test_jacobian_depth_zero_for_pure_rotation():
    q = np.array([np.cos(0.1), 0.0, np.sin(0.1), 0.0])
    T_ji = Pose(q, np.zeros(3))
    Jd = jacobian_depth(np.array([120.0, 90.0]), 0.8, T_ji, INTR)
    assert np.allclose(Jd, 0, atol=1e-12)


def test_jacobian_depth_direct_substitution():
    # t_ji=[1,0,0], fx=1, z=1, d=1, x_jn=0 -> [1, 0]
    T_ji = Pose(np.array([1.0, 0, 0, 0]), np.array([1.0, 0.0, 0.0]))
    Jd = jacobian_depth(np.array([-1.0, 0.0]), 1.0, T_ji, UNIT_INTR)
    assert np.allclose(Jd, [1.0, 0.0], atol=1e-12)


def test_jacobian_depth_matches_finite_differences():
    rng = np.random.default_rng(2)
    eps = 1e-6
    checked = 0
    while checked < 20:
        center, d, T_ji = random_edge_state(rng)
        try:
            Jd = jacobian_depth(center, d, T_ji, INTR)
            hi = residual(center, d + eps, T_ji, INTR, np.zeros(2))
            lo = residual(center, d - eps, T_ji, INTR, np.zeros(2))
        except BehindCamera:
            continue
        assert np.allclose(Jd, (hi - lo) / (2 * eps), rtol=1e-5, atol=1e-7)
        checked += 1


# -- normal equations ----------------------------------------------------------


def make_snapshot(rng, n_frames, n_patches, edges_per_patch=None, zero_weights=False):
    """Random valid snapshot with every patch anchored at a random frame."""
    poses = [Pose.identity()]
    for _ in range(n_frames - 1):
        poses.append(poses[-1] * exp(rng.normal(scale=0.05, size=6)))
    centers = np.column_stack(
        [rng.uniform(40, INTR.width - 40, n_patches), rng.uniform(40, INTR.height - 40, n_patches)]
    )
    inv_depth = rng.uniform(0.3, 1.5, n_patches)
    anchors = rng.integers(0, n_frames, n_patches)

    a, b, pids = [], [], []
    for p in range(n_patches):
        targets = [j for j in range(n_frames) if j != anchors[p]]
        if edges_per_patch is not None:
            targets = list(rng.choice(targets, size=min(edges_per_patch, len(targets)), replace=False))
        for j in targets:
            a.append(anchors[p])
            b.append(j)
            pids.append(p)
    E = len(a)
    delta = rng.normal(scale=0.5, size=(E, 2))
    weight = np.zeros((E, 2)) if zero_weights else rng.uniform(0.1, 2.0, (E, 2))
    return GraphSnapshot(
        frames=tuple(range(n_frames)),
        poses=tuple(poses),
        intrinsics=INTR,
        patch_keys=tuple((int(anchors[p]), p) for p in range(n_patches)),
        centers=centers,
        inv_depth=inv_depth,
        anchor_local=np.array(a, dtype=np.int64),
        target_local=np.array(b, dtype=np.int64),
        patch_local=np.array(pids, dtype=np.int64),
        delta=delta,
        weight=weight,
    )


def dense_system_oracle(snap, damping=1e-4):
    """Brute-force dense J^T W J over stacked [all twists; all depths]."""
    K, P = len(snap.frames), len(snap.patch_keys)
    n = 6 * K + P
    H = np.zeros((n, n))
    g = np.zeros(n)
    for e in range(snap.n_edges):
        ia, ib, p = snap.anchor_local[e], snap.target_local[e], snap.patch_local[e]
        T_ji = snap.poses[ib].inverse() * snap.poses[ia]
        c, d = snap.centers[p], snap.inv_depth[p]
        try:
            r = residual(c, d, T_ji, snap.intrinsics, snap.delta[e])
            Jrel = jacobian_pose(c, d, T_ji, snap.intrinsics)
            Jd = jacobian_depth(c, d, T_ji, snap.intrinsics)
        except BehindCamera:
            continue
        J = np.zeros((2, n))
        J[:, 6 * ib : 6 * ib + 6] = Jrel
        J[:, 6 * ia : 6 * ia + 6] = -Jrel @ T_ji.adjoint()
        J[:, 6 * K + p] = Jd
        W = np.diag(snap.weight[e])
        H += J.T @ W @ J
        g += -J.T @ W @ r
    H[6 * K :, 6 * K :] += damping * np.eye(P)
    return H, g


def test_zero_weights_give_zero_blocks_and_damped_C():
    rng = np.random.default_rng(3)
    snap = make_snapshot(rng, 3, 5, zero_weights=True)
    ne = build_normal_equations(snap, damping=1e-4)
    assert not np.any(ne.B) and not np.any(ne.E)
    assert not np.any(ne.v) and not np.any(ne.u)
    assert np.allclose(ne.C, 1e-4)


def test_single_edge_matches_dense_outer_product():
    rng = np.random.default_rng(4)
    snap = make_snapshot(rng, 2, 1)
    ne = build_normal_equations(snap, damping=0.0)
    H, g = dense_system_oracle(snap, damping=0.0)
    K = 2
    assert np.allclose(ne.B, H[: 6 * K, : 6 * K], atol=1e-12)
    assert np.allclose(ne.E, H[: 6 * K, 6 * K :], atol=1e-12)
    assert np.allclose(np.diag(ne.C), H[6 * K :, 6 * K :], atol=1e-12)
    assert np.allclose(ne.v, g[: 6 * K], atol=1e-12)
    assert np.allclose(ne.u, g[6 * K :], atol=1e-12)


def test_assembly_matches_dense_oracle_random():
    rng = np.random.default_rng(5)
    snap = make_snapshot(rng, 4, 12)
    ne = build_normal_equations(snap, damping=1e-4)
    H, g = dense_system_oracle(snap, damping=1e-4)
    K = 4
    assert np.allclose(ne.B, H[: 6 * K, : 6 * K], atol=1e-10)
    assert np.allclose(ne.E, H[: 6 * K, 6 * K :], atol=1e-10)
    assert np.allclose(np.diag(ne.C), H[6 * K :, 6 * K :], atol=1e-10)
    assert np.allclose(ne.v, g[: 6 * K], atol=1e-10)
    assert np.allclose(ne.u, g[6 * K :], atol=1e-10)


def test_assembly_bit_identical_across_runs():
    rng = np.random.default_rng(6)
    snap = make_snapshot(rng, 5, 20)
    ne1 = build_normal_equations(snap)
    ne2 = build_normal_equations(snap)
    assert np.array_equal(ne1.B, ne2.B)
    assert np.array_equal(schur_reduce(ne1).H_g, schur_reduce(ne2).H_g)


# -- schur reduction -----------------------------------------------------------


def test_schur_decoupled_system():
    rng = np.random.default_rng(7)
    B = rng.normal(size=(12, 12))
    B = B @ B.T
    v = rng.normal(size=12)
    ne = NormalEquations(
        B=B, E=np.zeros((12, 4)), C=np.full(4, 2.0), v=v, u=rng.normal(size=4),
        frames=(0, 1), patch_keys=tuple((0, i) for i in range(4)), damping=1e-4,
    )
    f = schur_reduce(ne)
    assert np.allclose(f.H_g, B)
    assert np.allclose(f.V_g, v)


def make_random_block_system(rng, n_frames, n_depths, rows_per_depth=4, damping=1e-4):
    """Random well-posed BA-structured system: dense pose columns, one depth
    column per measurement row (this is what keeps C diagonal)."""
    nb = 6 * n_frames
    n = nb + n_depths
    rows = max(n_depths * rows_per_depth, 2 * n)
    J = np.zeros((rows, n))
    J[:, :nb] = rng.normal(size=(rows, nb))
    depth_col = np.arange(rows) % n_depths
    J[np.arange(rows), nb + depth_col] = rng.normal(size=rows) * 2.0
    w = rng.uniform(0.5, 2.0, rows)
    r = rng.normal(size=rows)
    H = J.T @ (J * w[:, None])
    H[nb:, nb:] += damping * np.eye(n_depths)
    g = -J.T @ (w * r)
    ne = NormalEquations(
        B=H[:nb, :nb],
        E=H[:nb, nb:],
        C=np.diag(H[nb:, nb:]).copy(),
        v=g[:nb],
        u=g[nb:],
        frames=tuple(range(n_frames)),
        patch_keys=tuple((0, i) for i in range(n_depths)),
        damping=damping,
    )
    return ne, H, g


def test_schur_matches_dense_solve():
    # 2 poses, 3 depths: reduced pose solution and depth back-substitution
    # must reproduce the dense joint solve
    rng = np.random.default_rng(8)
    ne, H, g = make_random_block_system(rng, 2, 3)
    sol = np.linalg.solve(H, g)
    factor = schur_reduce(ne)
    xi = solve_pose_system(factor, anchor_first=False)
    dd = update_depths(ne, xi)
    assert np.linalg.norm(xi - sol[:12]) / np.linalg.norm(sol[:12]) < 1e-8
    assert np.linalg.norm(dd - sol[12:]) / np.linalg.norm(sol[12:]) < 1e-8


def test_schur_symmetry():
    rng = np.random.default_rng(9)
    for _ in range(10):
        snap = make_snapshot(rng, 4, 10)
        f = schur_reduce(build_normal_equations(snap))
        assert np.max(np.abs(f.H_g - f.H_g.T)) < 1e-12


def test_update_depths_trivial_cases():
    rng = np.random.default_rng(10)
    E = rng.normal(size=(12, 5))
    C = rng.uniform(0.5, 2.0, 5)
    ne = NormalEquations(
        B=np.eye(12), E=E, C=C, v=np.zeros(12), u=np.zeros(5),
        frames=(0, 1), patch_keys=tuple((0, i) for i in range(5)), damping=1e-4,
    )
    assert np.allclose(update_depths(ne, np.zeros(12)), 0)
    u = rng.normal(size=5)
    ne2 = NormalEquations(
        B=np.eye(12), E=np.zeros((12, 5)), C=C, v=np.zeros(12), u=u,
        frames=(0, 1), patch_keys=ne.patch_keys, damping=1e-4,
    )
    assert np.allclose(update_depths(ne2, rng.normal(size=12)), u / C)


def test_zero_information_solve_returns_zero():
    f = EventHessianFactor(H_g=np.zeros((12, 12)), V_g=np.zeros(12), frames=(0, 1))
    assert np.allclose(solve_pose_system(f), 0)


def test_dump_and_load_normal_equations(tmp_path):
    rng = np.random.default_rng(11)
    snap = make_snapshot(rng, 3, 6)
    ne = build_normal_equations(snap)
    path = tmp_path / "ne.bin"
    dump_normal_equations(ne, path)
    B, E, C, v, u = load_normal_equations(path)
    assert np.array_equal(B, ne.B)
    assert np.array_equal(E, ne.E)
    assert np.array_equal(C, ne.C)
    assert np.array_equal(v, ne.v)
    assert np.array_equal(u, ne.u)


# -- simulator-oracle integration ------------------------------------------------


def graph_from_scenario(scenario, provider, segments, n_patches=24, perturb=None, seed=0):
    """Window over scenario segments with true poses/depths (optionally
    perturbed away from truth for frames > 0)."""
    from evio.patch_graph import PatchGraph
    from evio.sim import synthesize_events
    from evio.events import voxelize

    rng = np.random.default_rng(seed)
    g = PatchGraph(scenario.intrinsics, seed=seed)
    for k, seg in enumerate(segments):
        pose = scenario.camera_pose_at_segment(seg)
        if perturb is not None and k > 0:
            rho = rng.uniform(-1, 1, 3)
            rho *= perturb[0] / max(np.linalg.norm(rho), 1e-9)
            phi = rng.uniform(-1, 1, 3)
            phi *= perturb[1] / max(np.linalg.norm(phi), 1e-9)
            pose = pose * exp(np.concatenate([rho, phi]))
        g.add_keyframe(seg, pose)
        ev = synthesize_events(scenario, seg)
        t0 = scenario.trajectory.t_start_us + seg * scenario.segment_dt_us
        vox = voxelize(ev, t0, scenario.segment_dt_us,
                       (5, scenario.intrinsics.height, scenario.intrinsics.width), seg)
        g.add_patches(vox, n_patches)
        g.add_edges(seg)
    for key, patch in g.patches.items():
        d = provider.true_inverse_depth(key[0], patch.center)
        if d is not None:
            patch.inv_depth = d
    return g


def test_ba_iterate_recovers_perturbed_poses():
    from evio.sim import OracleProvider, make_circle_scenario
    from evio.dba import ba_iterate

    scenario = make_circle_scenario(seed=21, n_segments=20)
    provider = OracleProvider(scenario, sigma_px=0.0)
    segments = list(range(4, 10))
    g = graph_from_scenario(
        scenario, provider, segments, perturb=(0.1, np.deg2rad(5.0)), seed=1
    )
    cost = ba_iterate(g, provider, n_iters=12)
    # weighted cost: weights are 1e4 per axis, so 1e-10 is a strict target
    assert cost < 1e-10
    for seg in segments:
        truth = scenario.camera_pose_at_segment(seg)
        assert np.linalg.norm(g.poses[seg].t - truth.t) < 1e-6


def test_ba_iterate_zero_iterations_no_change():
    from evio.sim import OracleProvider, make_circle_scenario
    from evio.dba import ba_iterate

    scenario = make_circle_scenario(seed=22, n_segments=20)
    provider = OracleProvider(scenario, sigma_px=0.0)
    g = graph_from_scenario(scenario, provider, [4, 5, 6], seed=2)
    before = {s: g.poses[s].matrix().copy() for s in g.window}
    ba_iterate(g, provider, n_iters=0)
    for s in g.window:
        assert np.array_equal(g.poses[s].matrix(), before[s])


def test_ba_iterate_all_dropped_edges_no_change():
    from evio.sim import OracleProvider, make_circle_scenario
    from evio.dba import ba_iterate

    scenario = make_circle_scenario(seed=23, n_segments=20)
    provider = OracleProvider(scenario, sigma_px=0.0, drop_rate=1.0)
    g = graph_from_scenario(scenario, provider, [4, 5, 6], seed=3)
    before = {s: g.poses[s].matrix().copy() for s in g.window}
    ba_iterate(g, provider, n_iters=3)
    for s in g.window:
        assert np.allclose(g.poses[s].matrix(), before[s], atol=1e-15)


def test_flow_magnitude_matches_oracle_truth():
    from evio.patch_graph import PatchGraph, snapshot as take_snapshot
    from evio.sim import OracleProvider, make_circle_scenario, synthesize_events
    from evio.events import voxelize

    scenario = make_circle_scenario(seed=24, n_segments=20)
    provider = OracleProvider(scenario, sigma_px=0.0)
    g = PatchGraph(scenario.intrinsics, seed=4)
    seg_a, seg_b = 5, 6
    g.add_keyframe(seg_a, scenario.camera_pose_at_segment(seg_a))
    ev = synthesize_events(scenario, seg_a)
    t0 = scenario.trajectory.t_start_us + seg_a * scenario.segment_dt_us
    vox = voxelize(ev, t0, scenario.segment_dt_us,
                   (5, scenario.intrinsics.height, scenario.intrinsics.width), seg_a)
    g.add_patches(vox, 16)
    g.add_keyframe(seg_b, scenario.camera_pose_at_segment(seg_b))
    g.add_edges(seg_b)
    for key, patch in g.patches.items():
        patch.inv_depth = provider.true_inverse_depth(key[0], patch.center)
    snap = take_snapshot(g)
    oracle_mean = provider.mean_flow_between(snap, seg_a, seg_b)
    assert oracle_mean > 0.1
    assert abs(g.flow_magnitude(seg_a, seg_b) - oracle_mean) < 1e-9

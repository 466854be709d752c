"""Sparse event patches, the bipartite co-visibility edge set, and keyframe
window bookkeeping (patch selection, edge wiring, removal/marginalization
triggers).

The graph tracks camera poses (camera-to-world) per keyframe segment.  A
patch is a p x p pixel block with one shared inverse depth, anchored to the
segment it was extracted from.  Edges link a patch ``(i, n)`` to a target
segment ``j`` and carry the latest predicted flow and confidence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter

from .events import EventVoxel
from .geometry import Pose

# reprojected depth below this is treated as behind the camera (meters)
MIN_DEPTH = 1e-3
INV_DEPTH_MIN = 1e-4
INV_DEPTH_MAX = 1e3

DEFAULT_PATCH_SIZE = 3
DEFAULT_WINDOW_SIZE = 10  # K
DEFAULT_LOOKBACK = 13  # r
DEFAULT_PATCHES_PER_SEGMENT = 96  # N
KEYFRAME_FLOW_THRESHOLD_PX = 60.0
PROTECTED_RECENT = 3
NMS_RADIUS_PX = 8.0

INSUFFICIENT_TEXTURE = "insufficient_texture"


class BehindCamera(Exception):
    """Reprojected point has depth <= MIN_DEPTH in the target camera."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])


def project(intr: Intrinsics, p: np.ndarray) -> np.ndarray:
    """Pinhole projection of camera-frame points (..., 3) -> pixels (..., 2)."""
    p = np.asarray(p, dtype=np.float64)
    z = p[..., 2]
    return np.stack(
        [intr.fx * p[..., 0] / z + intr.cx, intr.fy * p[..., 1] / z + intr.cy], axis=-1
    )


def backproject(intr: Intrinsics, uv: np.ndarray, inv_depth) -> np.ndarray:
    """Pixel (..., 2) + inverse depth -> camera-frame 3D point (..., 3)."""
    uv = np.asarray(uv, dtype=np.float64)
    d = np.asarray(inv_depth, dtype=np.float64)
    x = (uv[..., 0] - intr.cx) / intr.fx
    y = (uv[..., 1] - intr.cy) / intr.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1) / d[..., None]


@dataclass
class Patch:
    anchor_segment: int
    patch_id: int
    center: np.ndarray  # (2,) pixels
    pixels: np.ndarray  # (p*p, 2) pixel block around the center
    inv_depth: float  # 1/m, > 0


@dataclass
class PatchEdge:
    source: tuple[int, int]  # (segment i, patch n)
    target: int  # segment j
    flow_delta: np.ndarray = field(default_factory=lambda: np.zeros(2))
    confidence: np.ndarray = field(default_factory=lambda: np.zeros(2))


@dataclass(frozen=True)
class GraphSnapshot:
    """Immutable arrays for one bundle-adjustment pass.

    ``anchor_local``/``target_local`` index into ``frames``; ``patch_local``
    indexes into ``patch_keys``/``centers``/``inv_depth``.  Edge order is
    fixed (sorted by key) so assembly downstream is bit-reproducible.
    """

    frames: tuple[int, ...]
    poses: tuple[Pose, ...]  # camera-to-world per frame
    intrinsics: Intrinsics
    patch_keys: tuple[tuple[int, int], ...]
    centers: np.ndarray  # (P, 2)
    inv_depth: np.ndarray  # (P,)
    anchor_local: np.ndarray  # (E,)
    target_local: np.ndarray  # (E,)
    patch_local: np.ndarray  # (E,)
    delta: np.ndarray  # (E, 2)
    weight: np.ndarray  # (E, 2)

    @property
    def n_edges(self) -> int:
        return self.anchor_local.size


def reproject(patch: Patch, relative: Pose, intr: Intrinsics) -> np.ndarray:
    """Warp the patch center through ``relative`` (anchor cam -> target cam).

    Raises BehindCamera when the warped depth drops below MIN_DEPTH.
    """
    if patch.inv_depth <= 0:
        raise BehindCamera("non-positive inverse depth")
    p = relative.act(backproject(intr, patch.center, patch.inv_depth))
    if p[2] <= MIN_DEPTH:
        raise BehindCamera(f"reprojected depth {p[2]:.3g} m <= {MIN_DEPTH} m")
    return project(intr, p)


def select_patch_centers(
    voxel: EventVoxel,
    count: int,
    patch_size: int,
    rng: np.random.Generator,
    nms_radius: float = NMS_RADIUS_PX,
) -> tuple[np.ndarray, bool]:
    """Pick patch centers at local maxima of the per-pixel absolute event
    density, with greedy non-max suppression.

    Returns (centers (count, 2) float, low_texture) where low_texture marks
    that the density map offered fewer than ``count`` distinct sites and the
    remainder was filled uniformly at random.
    """
    score = np.abs(voxel.data).sum(axis=0)
    H, W = score.shape
    margin = patch_size // 2
    if H < patch_size or W < patch_size:
        raise ValueError("voxel smaller than the patch size")

    interior = np.zeros_like(score, dtype=bool)
    interior[margin : H - margin, margin : W - margin] = True
    is_max = (score == maximum_filter(score, size=3)) & (score > 0) & interior

    ys, xs = np.nonzero(is_max)
    order = np.lexsort((xs, ys, -score[ys, xs]))
    chosen: list[tuple[int, int]] = []
    r2 = nms_radius * nms_radius
    for idx in order:
        if len(chosen) == count:
            break
        x, y = int(xs[idx]), int(ys[idx])
        if all((x - cx) ** 2 + (y - cy) ** 2 > r2 for cx, cy in chosen):
            chosen.append((x, y))

    low_texture = len(chosen) < count
    taken = set(chosen)
    while len(chosen) < count:
        x = int(rng.integers(margin, W - margin))
        y = int(rng.integers(margin, H - margin))
        if (x, y) not in taken:
            taken.add((x, y))
            chosen.append((x, y))
    return np.array(chosen, dtype=np.float64), low_texture


def _patch_block(center: np.ndarray, patch_size: int) -> np.ndarray:
    half = patch_size // 2
    offs = np.arange(-half, half + 1)
    gx, gy = np.meshgrid(offs, offs)
    return np.column_stack([gx.ravel() + center[0], gy.ravel() + center[1]])


class PatchGraph:
    """Single-writer patch/keyframe store; snapshots are immutable values."""

    def __init__(
        self,
        intrinsics: Intrinsics,
        patch_size: int = DEFAULT_PATCH_SIZE,
        window_size: int = DEFAULT_WINDOW_SIZE,
        lookback: int = DEFAULT_LOOKBACK,
        flow_threshold_px: float = KEYFRAME_FLOW_THRESHOLD_PX,
        seed: int = 0,
    ):
        self.intrinsics = intrinsics
        self.patch_size = patch_size
        self.window_size = window_size
        self.lookback = lookback
        self.flow_threshold_px = flow_threshold_px
        self.rng = np.random.default_rng(seed)

        self.window: list[int] = []  # keyframe segment indices, increasing
        self.poses: dict[int, Pose] = {}  # camera-to-world
        self.flags: dict[int, set[str]] = {}
        self.patches: dict[tuple[int, int], Patch] = {}
        self.edges: dict[tuple[tuple[int, int], int], PatchEdge] = {}

    # -- keyframes ---------------------------------------------------------

    def add_keyframe(self, segment: int, pose: Pose) -> None:
        if self.window and segment <= self.window[-1]:
            raise ValueError("keyframe indices must be strictly increasing")
        self.window.append(segment)
        self.poses[segment] = pose
        self.flags[segment] = set()

    def set_pose(self, segment: int, pose: Pose) -> None:
        self.poses[segment] = pose

    # -- patches and edges ---------------------------------------------------

    def add_patches(self, voxel: EventVoxel, count: int) -> list[Patch]:
        seg = voxel.segment_index
        if seg not in self.poses:
            raise KeyError(f"segment {seg} is not a keyframe")
        centers, low_texture = select_patch_centers(
            voxel, count, self.patch_size, self.rng
        )
        if low_texture:
            self.flags[seg].add(INSUFFICIENT_TEXTURE)
        init_depth = self._initial_inv_depth()
        out = []
        for n in range(count):
            patch = Patch(
                anchor_segment=seg,
                patch_id=n,
                center=centers[n],
                pixels=_patch_block(centers[n], self.patch_size),
                inv_depth=init_depth,
            )
            self.patches[(seg, n)] = patch
            out.append(patch)
        return out

    def _initial_inv_depth(self) -> float:
        if not self.patches:
            return 1.0
        return float(np.median([p.inv_depth for p in self.patches.values()]))

    def add_edges(self, new_segment: int) -> list[tuple[tuple[int, int], int]]:
        """Wire the co-visibility edges involving ``new_segment``.

        New patches (anchored at the new segment) gain one edge to each of up
        to ``lookback`` prior keyframes; patches anchored in those keyframes
        gain a forward edge into the new segment.  Re-adding is idempotent.
        """
        if new_segment not in self.poses:
            raise KeyError(f"segment {new_segment} is not a keyframe")
        pos = self.window.index(new_segment)
        recent = self.window[max(0, pos - self.lookback) : pos]
        added = []
        for key, patch in sorted(self.patches.items()):
            i = patch.anchor_segment
            if i == new_segment:
                targets = recent
            elif i in recent:
                targets = [new_segment]
            else:
                continue
            for j in targets:
                ekey = (key, j)
                if ekey not in self.edges:
                    self.edges[ekey] = PatchEdge(source=key, target=j)
                    added.append(ekey)
        return added

    def remove_keyframe(self, segment: int) -> None:
        """Drop a keyframe with all anchored patches and touching edges."""
        self.window.remove(segment)
        self.poses.pop(segment)
        self.flags.pop(segment, None)
        dead_patches = [k for k in self.patches if k[0] == segment]
        for k in dead_patches:
            del self.patches[k]
        dead_edges = [
            ek for ek in self.edges if ek[0][0] == segment or ek[1] == segment
        ]
        for ek in dead_edges:
            del self.edges[ek]

    # -- geometry ------------------------------------------------------------

    def relative_pose(self, i: int, j: int) -> Pose:
        """T_ji mapping camera-i coordinates into camera j."""
        return self.poses[j].inverse() * self.poses[i]

    def reproject_center(self, key: tuple[int, int], target: int) -> np.ndarray:
        patch = self.patches[key]
        if target == patch.anchor_segment:
            return patch.center.copy()
        return reproject(patch, self.relative_pose(patch.anchor_segment, target), self.intrinsics)

    def flow_magnitude(self, frame_a: int, frame_b: int) -> float:
        """Mean patch-center displacement between two window frames.

        Uses patches linked by edges to both frames (anchors count as
        linked); returns +inf when no patch is shared.
        """
        for f in (frame_a, frame_b):
            if f not in self.poses:
                raise KeyError(f"frame {f} not in window")
        linked: dict[tuple[int, int], set[int]] = {}
        for (key, j) in self.edges:
            linked.setdefault(key, set()).add(j)
        mags = []
        for key, targets in sorted(linked.items()):
            seen = targets | {key[0]}
            if frame_a not in seen or frame_b not in seen:
                continue
            try:
                pa = self.reproject_center(key, frame_a)
                pb = self.reproject_center(key, frame_b)
            except BehindCamera:
                continue
            mags.append(np.linalg.norm(pa - pb))
        if not mags:
            return float("inf")
        return float(np.mean(mags))


@dataclass(frozen=True)
class KeyframeDecision:
    removed: int | None
    marginalize: int | None
    flow_px: float | None


def keyframe_update(graph: PatchGraph) -> KeyframeDecision:
    """Apply the keyframe retention rule and window cap.

    With at least 6 frames in the window, the flow between the 5th- and
    3rd-most-recent keyframes decides whether the 4th-most-recent is
    redundant (below the 60 px threshold) and removed together with its
    patches and edges.  The most recent 3 keyframes are never candidates.
    If the window still exceeds its capacity, the oldest keyframe is flagged
    for marginalization (the caller owns the prior construction) and dropped.
    """
    removed = None
    flow = None
    w = graph.window
    if len(w) >= 6:
        flow = graph.flow_magnitude(w[-5], w[-3])
        if flow < graph.flow_threshold_px:
            removed = w[-4]
            graph.remove_keyframe(removed)
    marginalize = None
    if len(graph.window) > graph.window_size:
        marginalize = graph.window[0]
    return KeyframeDecision(removed=removed, marginalize=marginalize, flow_px=flow)


def snapshot(graph: PatchGraph) -> GraphSnapshot:
    """Freeze the graph into flat arrays (fixed edge order) for dba passes."""
    frames = tuple(graph.window)
    frame_index = {f: k for k, f in enumerate(frames)}
    edge_keys = sorted(graph.edges.keys())
    patch_keys = tuple(sorted({ek[0] for ek in edge_keys}))
    patch_index = {k: i for i, k in enumerate(patch_keys)}

    E = len(edge_keys)
    anchor = np.zeros(E, dtype=np.int64)
    target = np.zeros(E, dtype=np.int64)
    pidx = np.zeros(E, dtype=np.int64)
    delta = np.zeros((E, 2))
    weight = np.zeros((E, 2))
    for e, ek in enumerate(edge_keys):
        (key, j) = ek
        edge = graph.edges[ek]
        anchor[e] = frame_index[key[0]]
        target[e] = frame_index[j]
        pidx[e] = patch_index[key]
        delta[e] = edge.flow_delta
        weight[e] = edge.confidence

    centers = np.array([graph.patches[k].center for k in patch_keys]) if patch_keys else np.zeros((0, 2))
    inv_depth = np.array([graph.patches[k].inv_depth for k in patch_keys]) if patch_keys else np.zeros(0)
    return GraphSnapshot(
        frames=frames,
        poses=tuple(graph.poses[f] for f in frames),
        intrinsics=graph.intrinsics,
        patch_keys=patch_keys,
        centers=centers,
        inv_depth=inv_depth,
        anchor_local=anchor,
        target_local=target,
        patch_local=pidx,
        delta=delta,
        weight=weight,
    )


def apply_update(
    graph: PatchGraph,
    snap: GraphSnapshot,
    new_poses: list[Pose] | None = None,
    depth_increment: np.ndarray | None = None,
) -> None:
    """Write back bundle-adjustment results; inverse depths are clamped."""
    if new_poses is not None:
        for f, pose in zip(snap.frames, new_poses):
            graph.poses[f] = pose
    if depth_increment is not None:
        for k, key in enumerate(snap.patch_keys):
            d = graph.patches[key].inv_depth + float(depth_increment[k])
            graph.patches[key].inv_depth = float(np.clip(d, INV_DEPTH_MIN, INV_DEPTH_MAX))


def dump_graph(graph: PatchGraph, path) -> None:
    """Line-oriented debug dump: keyframes, patches, then edges.

    Format (one record per line):
      K <segment> <qw> <qx> <qy> <qz> <tx> <ty> <tz> [flags]
      P <anchor> <id> <cx> <cy> <inv_depth>
      E <anchor> <id> <target> <dx> <dy> <wx> <wy>
    """
    with open(path, "w") as f:
        for seg in graph.window:
            pose = graph.poses[seg]
            q, t = pose.q, pose.t
            flags = ",".join(sorted(graph.flags.get(seg, ()))) or "-"
            f.write(
                f"K {seg} {q[0]:.17g} {q[1]:.17g} {q[2]:.17g} {q[3]:.17g} "
                f"{t[0]:.17g} {t[1]:.17g} {t[2]:.17g} {flags}\n"
            )
        for (i, n), p in sorted(graph.patches.items()):
            f.write(f"P {i} {n} {p.center[0]:.17g} {p.center[1]:.17g} {p.inv_depth:.17g}\n")
        for ((i, n), j), e in sorted(graph.edges.items()):
            f.write(
                f"E {i} {n} {j} {e.flow_delta[0]:.17g} {e.flow_delta[1]:.17g} "
                f"{e.confidence[0]:.17g} {e.confidence[1]:.17g}\n"
            )

"""Event stream handling: voxelization into D x H x W tensors per segment.

Events are carried as an (N, 4) int64 array with columns ``t_us, x, y, p``
(microsecond timestamp, pixel coordinates, polarity +/-1), nondecreasing in t.
Timestamps stay 64-bit integer microseconds end-to-end; floats appear only
inside the temporal interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

T_COL, X_COL, Y_COL, P_COL = 0, 1, 2, 3

# Interpolation weights are quantized to 32 fractional bits so that the two
# weights of every event sum to exactly 1.0 in float64 and deposits are
# order-independent dyadic sums (exact signed-mass conservation).
_WEIGHT_QUANTUM = float(2**32)


class EventOutOfBounds(Exception):
    """Event pixel coordinates fall outside the H x W sensor area."""


class UnsortedStream(Exception):
    """Event timestamps decrease somewhere in the stream."""


@dataclass(frozen=True)
class EventVoxel:
    """Discretized event tensor for one time segment [t_start, t_end)."""

    data: np.ndarray  # (D, H, W) float64
    t_start: int  # microseconds
    t_end: int  # microseconds
    segment_index: int

    def __post_init__(self):
        self.data.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


def voxelize(
    events: np.ndarray,
    t_start: int,
    dt_us: int,
    dims: tuple[int, int, int],
    segment_index: int = 0,
) -> EventVoxel:
    """Deposit events into D temporal bins with linear interpolation.

    Each event contributes its polarity split across the two bins nearest to
    its normalized time ``t* = (t - t_start) / dt * (D - 1)``.  An empty
    segment yields an all-zero tensor (not an error).  Events are sorted
    canonically before deposit so the result is independent of input order.
    """
    D, H, W = dims
    if D < 1 or H < 1 or W < 1:
        raise ValueError("voxel dims must all be >= 1")
    data = np.zeros((D, H, W), dtype=np.float64)
    events = np.asarray(events, dtype=np.int64).reshape(-1, 4)
    if events.shape[0] == 0:
        return EventVoxel(data, int(t_start), int(t_start + dt_us), segment_index)

    t, x, y, p = events[:, T_COL], events[:, X_COL], events[:, Y_COL], events[:, P_COL]
    if np.any(t < t_start) or np.any(t >= t_start + dt_us):
        raise ValueError("events outside [t_start, t_start + dt)")
    if np.any(x < 0) or np.any(x >= W) or np.any(y < 0) or np.any(y >= H):
        raise EventOutOfBounds(f"event pixel outside {H}x{W}")

    order = np.lexsort((p, y, x, t))
    t, x, y, p = t[order], x[order], y[order], p[order]

    tstar = (t - t_start).astype(np.float64) * (float(D - 1) / float(dt_us))
    k = np.floor(tstar).astype(np.int64)
    frac = np.round((tstar - k) * _WEIGHT_QUANTUM) / _WEIGHT_QUANTUM
    pol = p.astype(np.float64)

    np.add.at(data, (k, y, x), pol * (1.0 - frac))
    hi = frac > 0.0
    np.add.at(data, (k[hi] + 1, y[hi], x[hi]), pol[hi] * frac[hi])
    return EventVoxel(data, int(t_start), int(t_start + dt_us), segment_index)


def segment_stream(
    events: np.ndarray, dt_us: int, dims: tuple[int, int, int]
) -> list[EventVoxel]:
    """Split a sorted stream into contiguous half-open segments of length dt.

    Segment m covers ``[t0 + m*dt, t0 + (m+1)*dt)`` with t0 the first event
    time; an event exactly on a boundary goes to the later segment.  Segments
    with no events are included as zero tensors to keep the list contiguous.
    """
    events = np.asarray(events, dtype=np.int64).reshape(-1, 4)
    if events.shape[0] == 0:
        return []
    t = events[:, T_COL]
    if np.any(np.diff(t) < 0):
        raise UnsortedStream("event timestamps decrease")
    t0 = int(t[0])
    seg_of = (t - t0) // dt_us
    count = int(seg_of[-1]) + 1
    out = []
    bounds = np.searchsorted(seg_of, np.arange(count + 1))
    for m in range(count):
        chunk = events[bounds[m] : bounds[m + 1]]
        out.append(voxelize(chunk, t0 + m * dt_us, dt_us, dims, segment_index=m))
    return out


def write_events_csv(path, events: np.ndarray) -> None:
    events = np.asarray(events, dtype=np.int64).reshape(-1, 4)
    with open(path, "w") as f:
        f.write("t_us,x,y,p\n")
        for row in events:
            f.write(f"{row[0]},{row[1]},{row[2]},{row[3]}\n")


def read_events_csv(path) -> np.ndarray:
    with open(path) as f:
        header = f.readline().strip()
        if header != "t_us,x,y,p":
            raise ValueError(f"unexpected event CSV header: {header!r}")
        rows = [line.split(",") for line in f if line.strip()]
    if not rows:
        return np.zeros((0, 4), dtype=np.int64)
    return np.array(rows, dtype=np.int64)

"""Sensor data model, temporal synchronization, and LiDAR-to-camera projection.

Timestamps are integer nanoseconds throughout. Event windows are
half-open [t1, t2) so consecutive windows partition a stream exactly.
Depth maps store the ego-forward distance (LiDAR X) of the nearest
surviving point per pixel; 0.0 means no data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

NO_RETURN = float("inf")
Z_MIN = 0.05  # meters in front of the camera below which points are culled


@dataclass(frozen=True)
class Event:
    """Single brightness-change event: pixel, nanosecond timestamp, polarity."""

    x: int
    y: int
    t: int
    p: int


@dataclass
class EventStream:
    """Time-ordered event arrays covering [t_start, t_end]."""

    x: np.ndarray  # int32 pixel columns
    y: np.ndarray  # int32 pixel rows
    t: np.ndarray  # int64 nanoseconds, non-decreasing
    p: np.ndarray  # int8 polarity in {+1, -1}
    t_start: int
    t_end: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int32)
        self.y = np.asarray(self.y, dtype=np.int32)
        self.t = np.asarray(self.t, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=np.int8)

    def __len__(self) -> int:
        return self.t.size

    def validate(self, width: int, height: int) -> None:
        if len({self.x.size, self.y.size, self.t.size, self.p.size}) != 1:
            raise ValueError("event arrays have mismatched lengths")
        if self.t.size and np.any(np.diff(self.t) < 0):
            raise ValueError("event timestamps are not non-decreasing")
        if self.t.size and (self.t[0] < self.t_start or self.t[-1] > self.t_end):
            raise ValueError("event timestamps fall outside [t_start, t_end]")
        if np.any((self.x < 0) | (self.x >= width) | (self.y < 0) | (self.y >= height)):
            raise ValueError("event coordinates out of sensor bounds")
        if np.any(np.abs(self.p) != 1):
            raise ValueError("event polarity must be +1 or -1")

    @staticmethod
    def empty(t_start: int, t_end: int) -> "EventStream":
        z = np.zeros(0)
        return EventStream(z, z, z, z, t_start, t_end)


@dataclass
class LidarScan:
    """One planar scan: ranges in meters per beam, NO_RETURN = inf."""

    t: int
    ranges: np.ndarray
    angle_min: float
    angle_increment: float
    range_max: float

    def __post_init__(self):
        self.ranges = np.asarray(self.ranges, dtype=np.float64)

    @property
    def beam_count(self) -> int:
        return self.ranges.size

    def angles(self) -> np.ndarray:
        return self.angle_min + self.angle_increment * np.arange(self.beam_count)

    def validate(self) -> None:
        r = self.ranges
        hit = np.isfinite(r)
        if np.any(r[hit] <= 0) or np.any(r[hit] > self.range_max):
            raise ValueError("finite ranges must lie in (0, range_max]")


@dataclass
class CameraModel:
    """Pinhole intrinsics K plus LiDAR-to-camera extrinsics [R|t]."""

    K: np.ndarray
    R: np.ndarray
    t_vec: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t_vec = np.asarray(self.t_vec, dtype=np.float64).reshape(3)
        self.validate()

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def cx(self) -> float:
        return float(self.K[0, 2])

    @property
    def cy(self) -> float:
        return float(self.K[1, 2])

    def validate(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if abs(float(self.K[0, 1])) > 1e-12:
            raise ValueError("camera skew must be zero")
        err = float(np.max(np.abs(self.R @ self.R.T - np.eye(3))))
        if err > 1e-9:
            raise ValueError(f"R is not orthonormal (max |R R^T - I| = {err:.2e})")
        if abs(float(np.linalg.det(self.R)) - 1.0) > 1e-9:
            raise ValueError("R must have determinant +1")


@dataclass
class DepthMap:
    """Camera-view rendering of a scan; 0.0 marks pixels with no data."""

    pixels: np.ndarray
    t: int

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)


@dataclass
class EventFrame:
    """Per-pixel on/off event counts accumulated over [t_start, t_end)."""

    on_counts: np.ndarray
    off_counts: np.ndarray
    t_start: int
    t_end: int

    def total(self) -> int:
        return int(self.on_counts.sum() + self.off_counts.sum())


@dataclass(frozen=True)
class SteeringRecord:
    t: int
    angle_deg: float


@dataclass
class SteeringLog:
    """Time-ordered steering records as parallel arrays."""

    t: np.ndarray
    angle_deg: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64)
        self.angle_deg = np.asarray(self.angle_deg, dtype=np.float64)

    def __len__(self) -> int:
        return self.t.size

    def record(self, i: int) -> SteeringRecord:
        return SteeringRecord(int(self.t[i]), float(self.angle_deg[i]))


@dataclass
class SampleTriplet:
    """One training unit: stacked depth pair, event frame, target angle."""

    depth_pair: np.ndarray  # (2, H, W) meters
    event_frame: Optional[EventFrame]
    target_deg: float
    t1: int
    t2: int


def accumulate_events(stream: EventStream, t1: int, t2: int, width: int, height: int) -> EventFrame:
    """Count events with t in [t1, t2) into per-polarity images."""
    if t1 >= t2:
        raise ValueError(f"event window needs t1 < t2, got [{t1}, {t2})")
    on = np.zeros((height, width), dtype=np.int64)
    off = np.zeros((height, width), dtype=np.int64)
    i0 = int(np.searchsorted(stream.t, t1, side="left"))
    i1 = int(np.searchsorted(stream.t, t2, side="left"))
    if i1 > i0:
        xs = stream.x[i0:i1]
        ys = stream.y[i0:i1]
        pos = stream.p[i0:i1] > 0
        np.add.at(on, (ys[pos], xs[pos]), 1)
        np.add.at(off, (ys[~pos], xs[~pos]), 1)
    return EventFrame(on, off, t1, t2)


def associate_steering(scan_t: int, records: SteeringLog) -> SteeringRecord:
    """Nearest record by |t - scan_t|; exact ties resolve to the earlier one."""
    if len(records) == 0:
        raise ValueError("steering log is empty")
    pos = int(np.searchsorted(records.t, scan_t, side="left"))
    if pos == 0:
        return records.record(0)
    if pos == len(records):
        return records.record(len(records) - 1)
    before = scan_t - int(records.t[pos - 1])
    after = int(records.t[pos]) - scan_t
    return records.record(pos - 1) if before <= after else records.record(pos)


def project_points(points_lidar: np.ndarray, cam: CameraModel):
    """Project LiDAR-frame 3D points through [R|t] and K.

    Returns (cols, rows, forward, keep): integer pixel coordinates,
    the ego-forward (LiDAR X) distance per point, and the survivor
    mask. Points are dropped when camera-frame depth Z <= Z_MIN, when
    the pixel lands outside the image, or when the ego-forward distance
    is not positive (a non-positive value cannot be stored in a depth
    map whose 0.0 means "no data").
    """
    pts = np.asarray(points_lidar, dtype=np.float64).reshape(-1, 3)
    cam_pts = pts @ cam.R.T + cam.t_vec
    z = cam_pts[:, 2]
    forward = pts[:, 0]
    keep = (z > Z_MIN) & (forward > 0.0)
    zk = np.where(keep, z, 1.0)
    u = cam.fx * cam_pts[:, 0] / zk + cam.cx
    v = cam.fy * cam_pts[:, 1] / zk + cam.cy
    cols = np.floor(u + 0.5).astype(np.int64)
    rows = np.floor(v + 0.5).astype(np.int64)
    keep &= (cols >= 0) & (cols < cam.width) & (rows >= 0) & (rows < cam.height)
    return cols, rows, forward, keep


def project_scan(scan: LidarScan, cam: CameraModel) -> DepthMap:
    """Render a scan into the camera view, min-depth z-buffer on collisions."""
    theta = scan.angles()
    r = scan.ranges
    hit = np.isfinite(r) & (r > 0)
    pts = np.stack(
        [r[hit] * np.cos(theta[hit]), r[hit] * np.sin(theta[hit]), np.zeros(int(hit.sum()))],
        axis=1,
    )
    img = np.full((cam.height, cam.width), np.inf)
    if pts.size:
        cols, rows, forward, keep = project_points(pts, cam)
        np.minimum.at(img, (rows[keep], cols[keep]), forward[keep])
    img[~np.isfinite(img)] = 0.0
    return DepthMap(img, scan.t)


def build_triplets(scans: Sequence[LidarScan], events: Optional[EventStream],
                   steering: SteeringLog, cam: CameraModel,
                   include_events: bool = True) -> list[SampleTriplet]:
    """One triplet per consecutive scan pair: D = stacked projections,
    E = events accumulated over [t1, t2), target = steering nearest t2."""
    if len(scans) < 2:
        raise ValueError(f"need at least 2 scans to pair, got {len(scans)}")
    if include_events and events is None:
        raise ValueError("include_events=True but no event stream given")
    depth_maps = [project_scan(s, cam) for s in scans]
    triplets = []
    for d1, d2 in zip(depth_maps[:-1], depth_maps[1:]):
        frame = None
        if include_events:
            frame = accumulate_events(events, d1.t, d2.t, cam.width, cam.height)
        target = associate_steering(d2.t, steering)
        triplets.append(
            SampleTriplet(
                depth_pair=np.stack([d1.pixels, d2.pixels]),
                event_frame=frame,
                target_deg=target.angle_deg,
                t1=d1.t,
                t2=d2.t,
            )
        )
    return triplets


def rotation_about(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix about a unit axis."""
    ax = np.asarray(axis, dtype=np.float64)
    ax = ax / np.linalg.norm(ax)
    kx = np.array([[0, -ax[2], ax[1]], [ax[2], 0, -ax[0]], [-ax[1], ax[0], 0]])
    return np.eye(3) + np.sin(angle_rad) * kx + (1.0 - np.cos(angle_rad)) * (kx @ kx)


def perturb_extrinsics(cam: CameraModel, rot_deg: float, trans_m: float, seed: int) -> CameraModel:
    """Compose a random rotation of exactly rot_deg (axis uniform on the
    sphere) into R and shift t_vec by trans_m along a random direction."""
    if rot_deg < 0 or trans_m < 0:
        raise ValueError("perturbation magnitudes must be non-negative")
    rng = np.random.default_rng(seed)
    rot_axis = rng.normal(size=3)
    q = rotation_about(rot_axis, np.radians(rot_deg))
    shift_dir = rng.normal(size=3)
    shift_dir = shift_dir / np.linalg.norm(shift_dir)
    return CameraModel(
        K=cam.K.copy(),
        R=q @ cam.R,
        t_vec=cam.t_vec + trans_m * shift_dir,
        width=cam.width,
        height=cam.height,
    )

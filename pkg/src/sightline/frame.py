"""Frame and camera-pose data model.

Mirrors the acquisition side of a head-mounted capture loop: RGB frames
arrive with a timestamp, camera poses are recorded continuously in a
separate thread, and the detector always consumes the freshest frame.
Poses are looked up later by acquisition timestamp so detections can be
placed with the pose that was current when the image was taken.
"""

from __future__ import annotations

import math
import threading
from bisect import bisect_left
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .errors import ConfigurationError, NoPoseError, OrderingError, StalePoseError

DEFAULT_POSE_CAPACITY = 128
# Matches the end-to-end latency budget: a pose further than this from the
# frame's acquisition time is useless for anchoring.
DEFAULT_POSE_TOLERANCE_NS = 100_000_000

_ROT_TOL = 1e-6


def _read_only(a: np.ndarray) -> np.ndarray:
    view = a.view()
    view.setflags(write=False)
    return view


@dataclass(frozen=True)
class ImageFrame:
    """One captured RGB frame: (height, width, 3) uint8, row-major."""

    frame_id: int
    width: int
    height: int
    pixels: np.ndarray
    timestamp_ns: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"frame dims must be >= 1, got {self.width}x{self.height}")
        px = np.asarray(self.pixels, dtype=np.uint8)
        if px.shape != (self.height, self.width, 3):
            raise ValueError(
                f"pixel buffer shape {px.shape} does not match "
                f"(height={self.height}, width={self.width}, 3)"
            )
        object.__setattr__(self, "pixels", _read_only(px))


@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world transform sampled at one instant.

    camera_to_world is a 4x4 homogeneous matrix; the rotation block must be
    orthonormal and the last row [0, 0, 0, 1].
    """

    camera_to_world: np.ndarray
    timestamp_ns: int

    def __post_init__(self):
        m = np.asarray(self.camera_to_world, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"camera_to_world must be 4x4, got {m.shape}")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=_ROT_TOL):
            raise ValueError("camera_to_world last row must be [0, 0, 0, 1]")
        r = m[:3, :3]
        if np.abs(r.T @ r - np.eye(3)).max() >= _ROT_TOL:
            raise ValueError("rotation block is not orthonormal")
        if not math.isclose(np.linalg.det(r), 1.0, abs_tol=_ROT_TOL):
            raise ValueError("rotation block must have determinant 1")
        object.__setattr__(self, "camera_to_world", _read_only(m))

    @property
    def rotation(self) -> np.ndarray:
        return self.camera_to_world[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.camera_to_world[:3, 3]


@dataclass(frozen=True)
class CameraIntrinsics:
    """Projection matrix (camera space -> clip space) plus image extent."""

    projection: np.ndarray
    image_width: int
    image_height: int

    def __post_init__(self):
        m = np.asarray(self.projection, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"projection must be 4x4, got {m.shape}")
        if self.image_width < 1 or self.image_height < 1:
            raise ValueError("image extent must be >= 1 pixel")
        object.__setattr__(self, "projection", _read_only(m))


class PoseBuffer:
    """Timestamp-ordered ring of recent camera poses.

    One writer pushes monotonically timestamped poses; any number of readers
    may query concurrently. Queries see a consistent snapshot. The oldest
    pose is evicted once capacity is exceeded.
    """

    def __init__(self, capacity: int = DEFAULT_POSE_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._entries: list[CameraPose] = []
        self._timestamps: list[int] = []
        self._lock = threading.Lock()

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def push(self, pose: CameraPose) -> None:
        """Store a pose; rejects timestamps older than the newest entry."""
        with self._lock:
            if self._timestamps and pose.timestamp_ns < self._timestamps[-1]:
                raise OrderingError(
                    f"pose timestamp {pose.timestamp_ns} ns precedes newest "
                    f"stored timestamp {self._timestamps[-1]} ns"
                )
            self._entries.append(pose)
            self._timestamps.append(pose.timestamp_ns)
            if len(self._entries) > self.capacity:
                del self._entries[0]
                del self._timestamps[0]

    def pose_at(
        self, timestamp_ns: int, tolerance_ns: int = DEFAULT_POSE_TOLERANCE_NS
    ) -> CameraPose:
        """Return the stored pose nearest to timestamp_ns.

        The nearest pose must lie within tolerance_ns of the query; ties
        between two equally distant neighbours resolve to the earlier one.
        """
        with self._lock:
            if not self._entries:
                raise NoPoseError("pose buffer is empty")
            entries = list(self._entries)
            stamps = list(self._timestamps)
        i = bisect_left(stamps, timestamp_ns)
        best = None
        for j in (i - 1, i):
            if 0 <= j < len(stamps):
                gap = abs(stamps[j] - timestamp_ns)
                if best is None or gap < best[0]:
                    best = (gap, j)
        gap, j = best
        if gap > tolerance_ns:
            raise StalePoseError(
                f"nearest pose is {gap} ns away from query, tolerance {tolerance_ns} ns"
            )
        return entries[j]

    def snapshot(self) -> list[CameraPose]:
        with self._lock:
            return list(self._entries)


class FrameMailbox:
    """Capacity-1, latest-wins frame slot between producer and consumer.

    publish() replaces any unconsumed frame; take() removes and returns the
    held frame or None when empty. Both are safe to call from different
    threads.
    """

    def __init__(self):
        self._slot: ImageFrame | None = None
        self._lock = threading.Lock()

    def publish(self, frame: ImageFrame) -> None:
        with self._lock:
            self._slot = frame

    def take(self) -> ImageFrame | None:
        with self._lock:
            frame, self._slot = self._slot, None
            return frame


Trajectory = Callable[[int], np.ndarray]
"""Maps a timestamp in ns to a 4x4 camera-to-world matrix."""


def identity_trajectory(_timestamp_ns: int) -> np.ndarray:
    return np.eye(4)


def linear_trajectory(velocity_m_per_s: tuple[float, float, float]) -> Trajectory:
    """Camera translating at constant velocity, no rotation."""
    v = np.asarray(velocity_m_per_s, dtype=np.float64)

    def traj(timestamp_ns: int) -> np.ndarray:
        m = np.eye(4)
        m[:3, 3] = v * (timestamp_ns / 1e9)
        return m

    return traj


def yaw_trajectory(deg_per_s: float) -> Trajectory:
    """Camera spinning about the world y axis at a fixed rate."""

    def traj(timestamp_ns: int) -> np.ndarray:
        a = math.radians(deg_per_s) * (timestamp_ns / 1e9)
        c, s = math.cos(a), math.sin(a)
        m = np.eye(4)
        m[0, 0], m[0, 2] = c, s
        m[2, 0], m[2, 2] = -s, c
        return m

    return traj


@dataclass(frozen=True)
class SyntheticStreamSpec:
    """Deterministic stand-in for a camera: seeded pixels, fixed frame rate."""

    width: int = 1280
    height: int = 720
    fps: float = 30.0
    count: int = 1
    seed: int = 0
    trajectory: Trajectory = field(default=identity_trajectory)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigurationError("stream dims must be >= 1")
        if self.fps <= 0:
            raise ConfigurationError("fps must be > 0")
        if self.count < 1:
            raise ConfigurationError("count must be >= 1")


def synthetic_stream(spec: SyntheticStreamSpec) -> Iterator[tuple[ImageFrame, CameraPose]]:
    """Yield (frame, pose) pairs with timestamps spaced 1/fps apart.

    Pixels come from a PCG64 generator seeded with spec.seed, so the same
    spec reproduces bit-identical buffers.
    """
    rng = np.random.default_rng(spec.seed)
    for i in range(spec.count):
        t = round(i * 1e9 / spec.fps)
        pixels = rng.integers(0, 256, size=(spec.height, spec.width, 3), dtype=np.uint8)
        frame = ImageFrame(
            frame_id=i, width=spec.width, height=spec.height, pixels=pixels, timestamp_ns=t
        )
        pose = CameraPose(camera_to_world=spec.trajectory(t), timestamp_ns=t)
        yield frame, pose

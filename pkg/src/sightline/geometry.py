"""2D detection -> 3D world anchoring.

Convention (used everywhere): right-handed camera space, camera looks down
-z, y up; pixel origin top-left with a +0.5 pixel-center offset; NDC has x
right and y up in [-1, 1]. A detection is anchored with the pose recorded
at the frame's acquisition time, never the newest pose, so the placement
stays correct even if the camera has moved since the image was captured.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decode import Detection, FULL_FRAME
from .errors import GeometryError, NoIntersectionError
from .frame import CameraIntrinsics, CameraPose, PoseBuffer, DEFAULT_POSE_TOLERANCE_NS


@dataclass(frozen=True)
class Ray3D:
    """World-space ray: origin in meters, unit direction."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        if o.shape != (3,) or d.shape != (3,):
            raise ValueError("origin and direction must be 3-vectors")
        norm = np.linalg.norm(d)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"direction must be unit length, |d| = {norm}")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class RayOnly:
    """Leave the anchor as a bare ray (no depth source available)."""


@dataclass(frozen=True)
class FixedDepth:
    """Place the anchor a fixed distance along the ray."""

    depth_m: float

    def __post_init__(self):
        if self.depth_m <= 0:
            raise ValueError("depth must be > 0")


@dataclass(frozen=True)
class PlaneIntersection:
    """Place the anchor where the ray hits a world plane."""

    point: tuple[float, float, float]
    normal: tuple[float, float, float]

    def __post_init__(self):
        if np.linalg.norm(self.normal) == 0:
            raise ValueError("plane normal must be non-zero")


PlacementPolicy = RayOnly | FixedDepth | PlaneIntersection


@dataclass(frozen=True)
class Anchor3D:
    """World placement of one detection at its acquisition time."""

    ray: Ray3D
    point: np.ndarray | None
    detection: Detection
    acquisition_timestamp_ns: int


def unproject(pixel: tuple[float, float], intrinsics: CameraIntrinsics) -> np.ndarray:
    """Pixel -> unit view direction in camera coordinates.

    The pixel maps to NDC with a half-pixel center offset, the NDC point at
    unit depth goes through the inverse projection, and the resulting
    camera-space point is normalized. The direction is canonicalized into
    the forward (-z) half-space.
    """
    u, v = pixel
    w, h = intrinsics.image_width, intrinsics.image_height
    if not (0 <= u < w and 0 <= v < h):
        raise GeometryError(f"pixel ({u}, {v}) outside image {w}x{h}")
    ndc_x = 2.0 * (u + 0.5) / w - 1.0
    ndc_y = 1.0 - 2.0 * (v + 0.5) / h
    try:
        inv = np.linalg.inv(intrinsics.projection)
    except np.linalg.LinAlgError as exc:
        raise GeometryError("projection matrix is singular") from exc
    hpoint = inv @ np.array([ndc_x, ndc_y, 1.0, 1.0])
    if abs(hpoint[3]) < 1e-12:
        direction = hpoint[:3]
    else:
        direction = hpoint[:3] / hpoint[3]
    norm = np.linalg.norm(direction)
    if norm < 1e-12:
        raise GeometryError("inverse projection produced a degenerate direction")
    direction = direction / norm
    if direction[2] > 0:
        direction = -direction
    return direction


def project_direction(direction_cam: np.ndarray, intrinsics: CameraIntrinsics) -> tuple[float, float]:
    """Camera-space direction -> pixel; the inverse of unproject.

    Used as the independent check of the unprojection: forward-projecting
    the unprojected direction must recover the original pixel center.
    """
    p = intrinsics.projection @ np.append(np.asarray(direction_cam, dtype=np.float64), 1.0)
    if abs(p[3]) < 1e-12:
        raise GeometryError("direction projects to infinity")
    ndc_x, ndc_y = p[0] / p[3], p[1] / p[3]
    u = (ndc_x + 1.0) * intrinsics.image_width / 2.0 - 0.5
    v = (1.0 - ndc_y) * intrinsics.image_height / 2.0 - 0.5
    return u, v


def make_perspective_projection(
    fov_y_deg: float, width: int, height: int, near: float = 0.1, far: float = 100.0
) -> np.ndarray:
    """Symmetric pinhole projection matrix for the stated convention."""
    f = 1.0 / np.tan(np.radians(fov_y_deg) / 2.0)
    aspect = width / height
    m = np.zeros((4, 4))
    m[0, 0] = f / aspect
    m[1, 1] = f
    m[2, 2] = (far + near) / (near - far)
    m[2, 3] = 2.0 * far * near / (near - far)
    m[3, 2] = -1.0
    return m


def to_world(direction_cam: np.ndarray, pose: CameraPose) -> Ray3D:
    """Rotate a camera-space direction into the world; origin = camera position."""
    direction = pose.rotation @ np.asarray(direction_cam, dtype=np.float64)
    direction = direction / np.linalg.norm(direction)
    return Ray3D(origin=pose.translation.copy(), direction=direction)


def _place(ray: Ray3D, policy: PlacementPolicy) -> np.ndarray | None:
    if isinstance(policy, RayOnly):
        return None
    if isinstance(policy, FixedDepth):
        return ray.origin + policy.depth_m * ray.direction
    if isinstance(policy, PlaneIntersection):
        n = np.asarray(policy.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        p0 = np.asarray(policy.point, dtype=np.float64)
        denom = float(n @ ray.direction)
        if abs(denom) < 1e-9:
            raise NoIntersectionError("ray is parallel to the placement plane")
        t = float(n @ (p0 - ray.origin)) / denom
        if t <= 0:
            raise NoIntersectionError("placement plane is behind the camera")
        return ray.origin + t * ray.direction
    raise TypeError(f"unknown placement policy {policy!r}")


def anchor_detection(
    det: Detection,
    frame_timestamp_ns: int,
    intrinsics: CameraIntrinsics,
    poses: PoseBuffer,
    policy: PlacementPolicy = RayOnly(),
    pose_tolerance_ns: int = DEFAULT_POSE_TOLERANCE_NS,
) -> Anchor3D:
    """Anchor a full-frame detection using its acquisition-time pose.

    The ray goes through the bbox center; the optional point comes from the
    placement policy. Raises StalePoseError when no pose near the frame's
    timestamp is buffered, GeometryError when the bbox leaves the image.
    """
    if det.space != FULL_FRAME:
        raise GeometryError(f"anchoring requires full-frame detections, got '{det.space}'")
    x, y, w, h = det.bbox
    if x < 0 or y < 0 or x + w > intrinsics.image_width or y + h > intrinsics.image_height:
        raise GeometryError(f"bbox {det.bbox} lies outside image "
                            f"{intrinsics.image_width}x{intrinsics.image_height}")
    pose = poses.pose_at(frame_timestamp_ns, pose_tolerance_ns)
    direction_cam = unproject((x + w / 2.0, y + h / 2.0), intrinsics)
    ray = to_world(direction_cam, pose)
    point = _place(ray, policy)
    return Anchor3D(ray=ray, point=point, detection=det, acquisition_timestamp_ns=frame_timestamp_ns)


def anchor_to_record(anchor: Anchor3D) -> dict:
    """Serializable extension carrying the world-space placement."""
    rec = {
        "ray_origin": [round(float(v), 9) for v in anchor.ray.origin],
        "ray_direction": [round(float(v), 9) for v in anchor.ray.direction],
        "acquisition_timestamp_ns": anchor.acquisition_timestamp_ns,
    }
    if anchor.point is not None:
        rec["point"] = [round(float(v), 9) for v in anchor.point]
    return rec

"""Rigid-body poses, quaternion algebra, and pinhole camera geometry.

Conventions used throughout the package:

* world frame is right-handed with z pointing up,
* quaternions are scalar-first ``(w, x, y, z)`` and kept unit-norm,
* the camera frame follows the usual computer-vision layout: +z along the
  optical axis, +x to the right in the image (u), +y down in the image (v),
* a camera pose maps camera-frame coordinates into the world frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_UNIT_TOL = 1e-9


class ProjectionError(Exception):
    """Base class for camera geometry failures."""


class PixelOutOfBounds(ProjectionError):
    """Pixel coordinates fall outside the image rectangle."""


class BehindCamera(ProjectionError):
    """The queried point or intersection lies behind the camera."""


class NoIntersection(ProjectionError):
    """Ray is parallel to the plane (within tolerance)."""


# ---------------------------------------------------------------------------
# quaternion helpers
# ---------------------------------------------------------------------------

def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n < _UNIT_TOL:
        raise ValueError("cannot normalize a zero-norm quaternion")
    return q / n


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product a*b, both scalar-first."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([w, -x, -y, -z])


def quat_rotate(q, v) -> np.ndarray:
    """Rotate vector v by unit quaternion q."""
    w = q[0]
    u = np.asarray(q[1:], dtype=float)
    v = np.asarray(v, dtype=float)
    # Rodrigues-style expansion, cheaper than building the matrix.
    return v + 2.0 * np.cross(u, np.cross(u, v) + w * v)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n < _UNIT_TOL:
        raise ValueError("rotation axis must be nonzero")
    half = 0.5 * angle
    return np.concatenate(([np.cos(half)], np.sin(half) * axis / n))


def quat_angle(q) -> float:
    """Absolute rotation angle of q in radians, in [0, pi]."""
    w = np.clip(abs(q[0]) / np.linalg.norm(q), -1.0, 1.0)
    return 2.0 * np.arccos(w)


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(m) -> np.ndarray:
    """Unit quaternion for a proper rotation matrix (Shepperd's method)."""
    m = np.asarray(m, dtype=float)
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(m[i, i] - m[j, j] - m[k, k] + 1.0) * 2.0
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def rotation_vector(q) -> np.ndarray:
    """Axis-angle vector (axis * angle) for unit quaternion q."""
    q = np.asarray(q, dtype=float)
    if q[0] < 0:
        q = -q
    w = min(q[0], 1.0)
    sin_half = np.linalg.norm(q[1:])
    if sin_half < 1e-12:
        return 2.0 * q[1:]  # small-angle limit
    angle = 2.0 * np.arctan2(sin_half, w)
    return q[1:] / sin_half * angle


# ---------------------------------------------------------------------------
# poses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose3D:
    """Rigid transform: rotate by ``quat`` then translate by ``position``.

    The quaternion must already be unit length (within 1e-9). It is stored
    exactly as given rather than re-normalized, so values that crossed the
    wire keep their bytes; callers holding a raw quaternion normalize first.
    """

    position: np.ndarray
    quat: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(3)
        q = np.asarray(self.quat, dtype=float).reshape(4)
        norm = float(np.linalg.norm(q))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"quaternion norm {norm:.12g} is not 1")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "quat", q)

    @classmethod
    def identity(cls) -> "Pose3D":
        return cls(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_xyz(cls, x: float, y: float, z: float) -> "Pose3D":
        return cls(np.array([x, y, z]), np.array([1.0, 0.0, 0.0, 0.0]))

    def compose(self, other: "Pose3D") -> "Pose3D":
        """Transform composition: apply ``other`` first, then ``self``."""
        return Pose3D(self.position + quat_rotate(self.quat, other.position),
                      quat_multiply(self.quat, other.quat))

    def inverse(self) -> "Pose3D":
        qc = quat_conjugate(self.quat)
        return Pose3D(-quat_rotate(qc, self.position), qc)

    def transform_point(self, p) -> np.ndarray:
        return self.position + quat_rotate(self.quat, np.asarray(p, dtype=float))

    def rotate_vector(self, v) -> np.ndarray:
        return quat_rotate(self.quat, v)

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat)


def pose_difference(a: Pose3D, b: Pose3D) -> tuple[float, float]:
    """(translation distance, rotation angle) between two poses."""
    dp = float(np.linalg.norm(a.position - b.position))
    dq = quat_multiply(quat_conjugate(a.quat), b.quat)
    return dp, quat_angle(dq)


# ---------------------------------------------------------------------------
# rays, planes, cameras
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=float).reshape(3)
        d = np.asarray(self.direction, dtype=float).reshape(3)
        n = np.linalg.norm(d)
        if n < _UNIT_TOL:
            raise ValueError("ray direction must be nonzero")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d / n)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class Plane:
    point: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.point, dtype=float).reshape(3)
        n = np.asarray(self.normal, dtype=float).reshape(3)
        norm = np.linalg.norm(n)
        if norm < _UNIT_TOL:
            raise ValueError("plane normal must be nonzero")
        object.__setattr__(self, "point", p)
        object.__setattr__(self, "normal", n / norm)

    @classmethod
    def horizontal(cls, z: float) -> "Plane":
        return cls(np.array([0.0, 0.0, z]), np.array([0.0, 0.0, 1.0]))


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with pixel-unit focal lengths and no distortion.

    ``pose`` maps camera coordinates to world coordinates; its position is
    the optical center.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: Pose3D = field(default_factory=Pose3D.identity)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image "
                f"{self.width}x{self.height}")

    def contains_pixel(self, pixel) -> bool:
        u, v = float(pixel[0]), float(pixel[1])
        return 0.0 <= u < self.width and 0.0 <= v < self.height


def project(cam: CameraModel, point_world) -> np.ndarray:
    """World point -> pixel (u, v). Raises BehindCamera for depth <= 0."""
    p_cam = cam.pose.inverse().transform_point(point_world)
    z = p_cam[2]
    if z <= 0.0:
        raise BehindCamera(f"point depth {z:.6g} is not positive")
    return np.array([cam.cx + cam.fx * p_cam[0] / z,
                     cam.cy + cam.fy * p_cam[1] / z])


def backproject(cam: CameraModel, pixel) -> Ray:
    """Pixel -> world-frame viewing ray through the optical center."""
    if not cam.contains_pixel(pixel):
        raise PixelOutOfBounds(
            f"pixel ({pixel[0]}, {pixel[1]}) outside image {cam.width}x{cam.height}")
    d_cam = np.array([(float(pixel[0]) - cam.cx) / cam.fx,
                      (float(pixel[1]) - cam.cy) / cam.fy,
                      1.0])
    return Ray(cam.pose.position, cam.pose.rotate_vector(d_cam))


def ray_plane_intersect(ray: Ray, plane: Plane) -> np.ndarray:
    """Intersection point of a ray with a plane.

    Raises NoIntersection when the ray is parallel to the plane (|n.d| <= 1e-9)
    and BehindCamera when the hit parameter is negative.
    """
    denom = float(np.dot(plane.normal, ray.direction))
    if abs(denom) <= 1e-9:
        raise NoIntersection("ray is parallel to the plane")
    t = float(np.dot(plane.normal, plane.point - ray.origin)) / denom
    if t < 0.0:
        raise BehindCamera(f"intersection parameter t={t:.6g} is negative")
    return ray.at(t)


def infer_object_position(cam: CameraModel, bbox_center, object_size,
                          table_height: float) -> Pose3D:
    """Place an object of known size from a single detection.

    The detection's bbox center is cast through the camera onto the horizontal
    plane raised above the table top by half the object height, which is where
    the centroid of an upright object resting on the table sits. Orientation is
    reported as identity; a single box detection carries no heading.
    """
    size = np.asarray(object_size, dtype=float)
    if size.shape != (3,) or np.any(size <= 0):
        raise ValueError(f"object size must be 3 positive extents, got {size}")
    ray = backproject(cam, bbox_center)
    centroid_plane = Plane.horizontal(table_height + 0.5 * size[2])
    position = ray_plane_intersect(ray, centroid_plane)
    return Pose3D(position, np.array([1.0, 0.0, 0.0, 0.0]))


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> Pose3D:
    """Camera pose at ``position`` with the optical axis through ``target``.

    Uses the CV frame convention (+x right, +y down, +z forward); the image
    x axis is kept horizontal with respect to ``up``.
    """
    position = np.asarray(position, dtype=float)
    z = np.asarray(target, dtype=float) - position
    nz = np.linalg.norm(z)
    if nz < _UNIT_TOL:
        raise ValueError("camera position and target coincide")
    z = z / nz
    x = np.cross(z, np.asarray(up, dtype=float))
    nx = np.linalg.norm(x)
    if nx < _UNIT_TOL:
        raise ValueError("optical axis is parallel to the up vector")
    x = x / nx
    y = np.cross(z, x)
    return Pose3D(position, quat_from_matrix(np.column_stack([x, y, z])))

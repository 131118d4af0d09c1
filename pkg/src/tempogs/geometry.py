"""Cameras, similarity transforms, point clouds and pinhole projection.

Convention: camera poses are stored world->camera, i.e. a world point ``p``
lands at ``rotation @ p + translation`` in camera coordinates, with +z
pointing forward and pixel ``(u, v)`` measured from the top-left corner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

# Depth at or below which a point counts as behind the camera.
BEHIND_EPS = 1e-8
_ORTHO_TOL = 1e-9


def _check_rotation(rotation: np.ndarray, what: str) -> None:
    if rotation.shape != (3, 3):
        raise ValueError(f"{what}: rotation must be 3x3, got {rotation.shape}")
    if not np.allclose(rotation.T @ rotation, np.eye(3), atol=_ORTHO_TOL, rtol=0):
        raise ValueError(f"{what}: rotation is not orthonormal")
    if abs(np.linalg.det(rotation) - 1.0) > _ORTHO_TOL:
        raise ValueError(f"{what}: rotation has det != +1")


def orthonormalize(rotation: np.ndarray) -> np.ndarray:
    """Project a near-rotation matrix onto SO(3) with an SVD."""
    u, _, vt = np.linalg.svd(rotation)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


# ---------------------------------------------------------------------------
# rotation helpers (quaternions are (w, x, y, z))
# ---------------------------------------------------------------------------


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from quaternions; works on (4,) or (N, 4), normalizing first."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((q.shape[0], 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r[0] if single else r


def rotmat_to_quat(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (w >= 0) for a rotation matrix (Shepperd's method)."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
        q = np.array([(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s])
    elif r[1, 1] > r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
        q = np.array([(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
        q = np.array([(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def axis_angle_to_rotmat(axis: Sequence[float], angle: float) -> np.ndarray:
    """Rodrigues' formula; ``angle`` in radians."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)


def rot_z(degrees: float) -> np.ndarray:
    return axis_angle_to_rotmat((0, 0, 1), math.radians(degrees))


def rotation_angle_deg(r: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in degrees."""
    c = (np.trace(r) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def look_at(eye: Sequence[float], target: Sequence[float], up: Sequence[float] = (0, 0, 1)) -> tuple[np.ndarray, np.ndarray]:
    """World->camera rotation and translation for a camera at ``eye`` looking at ``target``.

    Image y points down, so the camera's -y axis is aligned with ``up`` as far as possible.
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    return rotation, -rotation @ eye


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a world->camera pose."""

    id: int
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    image: Optional[str] = None

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)
        _check_rotation(rotation, f"camera {self.id}")
        if self.width < 16 or self.height < 16:
            raise ValueError(f"camera {self.id}: image must be at least 16x16")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"camera {self.id}: focal lengths must be positive")
        if not np.all(np.isfinite(translation)):
            raise ValueError(f"camera {self.id}: non-finite translation")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def replace(self, **changes) -> "Camera":
        fields_ = dict(
            id=self.id, width=self.width, height=self.height, fx=self.fx, fy=self.fy,
            cx=self.cx, cy=self.cy, rotation=self.rotation, translation=self.translation,
            image=self.image,
        )
        fields_.update(changes)
        return Camera(**fields_)


@dataclass(frozen=True)
class SimilarityTransform:
    """x -> scale * rotation @ x + translation."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)
        object.__setattr__(self, "scale", float(self.scale))
        if not self.scale > 0:
            raise ValueError("similarity scale must be positive")
        _check_rotation(rotation, "similarity")

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "SimilarityTransform":
        """From a 4x4 (or 3x4) matrix whose upper-left block is ``s * R``."""
        m = np.asarray(m, dtype=np.float64)
        sr = m[:3, :3]
        s = np.cbrt(np.linalg.det(sr))
        return cls(s, orthonormalize(sr / s), m[:3, 3])

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return self.scale * (p @ self.rotation.T) + self.translation

    def inverse(self) -> "SimilarityTransform":
        rt = self.rotation.T
        return SimilarityTransform(1.0 / self.scale, rt, -(rt @ self.translation) / self.scale)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """``self`` after ``other``: x -> self(other(x))."""
        return SimilarityTransform(
            self.scale * other.scale,
            orthonormalize(self.rotation @ other.rotation),
            self.scale * (self.rotation @ other.translation) + self.translation,
        )

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.translation
        return m

    def to_list(self) -> list[float]:
        """12 row-major entries of the 3x4 ``[R | t]`` block followed by the scale."""
        return [*np.hstack([self.rotation, self.translation[:, None]]).ravel().tolist(), self.scale]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "SimilarityTransform":
        v = np.asarray(values, dtype=np.float64)
        if v.shape != (13,):
            raise ValueError("expected 13 values (3x4 [R|t] row-major, then scale)")
        block = v[:12].reshape(3, 4)
        return cls(v[12], block[:, :3], block[:, 3])


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", points)
        if not np.all(np.isfinite(points)):
            raise ValueError("point cloud has non-finite coordinates")
        if self.colors is not None:
            colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(colors) != len(points):
                raise ValueError(f"{len(colors)} colors for {len(points)} points")
            object.__setattr__(self, "colors", colors)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, index: np.ndarray) -> "PointCloud":
        return PointCloud(self.points[index], None if self.colors is None else self.colors[index])

    def extent(self) -> float:
        """Bounding-box diagonal; 0 for clouds with fewer than two points."""
        if len(self.points) < 2:
            return 0.0
        return float(np.linalg.norm(self.points.max(0) - self.points.min(0)))


@dataclass(frozen=True)
class Match2D3D:
    """A pixel in t0 view ``view_id`` matched to point ``point_index`` of the dense cloud."""

    view_id: int
    pixel: tuple[float, float]
    point_index: int


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def project(camera: Camera, point: Sequence[float]) -> Optional[np.ndarray]:
    """Pixel coordinates of a world point, or ``None`` if it is behind the camera."""
    p = np.asarray(point, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("point must be finite")
    x, y, z = camera.rotation @ p + camera.translation
    if z <= BEHIND_EPS:
        return None
    return np.array([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy])


def project_points(camera: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`project`: returns ``(pixels, in_front)``; pixels of behind points are NaN."""
    pc = camera.to_camera(points)
    z = pc[:, 2]
    in_front = z > BEHIND_EPS
    safe_z = np.where(in_front, z, np.nan)
    uv = np.stack([camera.fx * pc[:, 0] / safe_z + camera.cx, camera.fy * pc[:, 1] / safe_z + camera.cy], axis=1)
    return uv, in_front


def apply_similarity(s: SimilarityTransform, cloud: PointCloud) -> PointCloud:
    return PointCloud(s.apply(cloud.points), cloud.colors)


def apply_similarity_to_camera(s: SimilarityTransform, camera: Camera) -> Camera:
    """Re-express a camera in the frame reached by ``s``.

    Camera-space coordinates of the transformed world get multiplied by ``s.scale``, which
    leaves pixel coordinates unchanged.
    """
    rotation = orthonormalize(camera.rotation @ s.rotation.T)
    translation = s.scale * camera.translation - rotation @ s.translation
    return camera.replace(rotation=rotation, translation=translation)

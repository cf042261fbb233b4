"""Pinhole camera geometry: poses, projection, backprojection, triangulation.

Pose convention is camera-from-world throughout: x_cam = R @ x_world + t.
All math is float64; positions are meters, pixels are image coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CheiralityError, DegenerateGeometryError

ORTHONORMALITY_TOL = 1e-9
MIN_RAY_ANGLE_DEG = 0.1


@dataclass(frozen=True)
class Pose:
    """Rigid transform, camera-from-world."""

    rotation: np.ndarray     # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        err = np.abs(r.T @ r - np.eye(3)).max()
        if err >= ORTHONORMALITY_TOL:
            raise ValueError(f"rotation not orthonormal (|R^T R - I|_inf = {err:.3e})")
        if np.linalg.det(r) <= 0:
            raise ValueError("rotation must have det +1 (right-handed)")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        """From a 4x4 camera-from-world homogeneous matrix."""
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected 4x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def transform(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) to camera frame."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def camera_center(self) -> np.ndarray:
        """Camera center in world coordinates (-R^T t)."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def contains(self, pixels: np.ndarray) -> np.ndarray:
        """Boolean mask of pixels inside the image rectangle."""
        p = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        return (
            (p[:, 0] >= 0.0)
            & (p[:, 0] <= self.width - 1.0)
            & (p[:, 1] >= 0.0)
            & (p[:, 1] <= self.height - 1.0)
        )


def project_points(
    points: np.ndarray, pose: Pose, intr: Intrinsics
) -> tuple[np.ndarray, np.ndarray]:
    """Project world points; returns (pixels (N, 2), depths (N,)).

    Does not raise on points behind the camera: callers filter on depth > 0.
    Pixels for nonpositive depths are not meaningful.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cam = pose.transform(pts)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * cam[:, 0] / z + intr.cx
        v = intr.fy * cam[:, 1] / z + intr.cy
    return np.stack([u, v], axis=1), z


def project(point: np.ndarray, pose: Pose, intr: Intrinsics) -> np.ndarray:
    """Project a single world point, raising if it lies behind the camera."""
    pixels, z = project_points(point, pose, intr)
    if z[0] <= 0:
        raise CheiralityError(f"point has nonpositive depth {z[0]:.6g}")
    return pixels[0]


def backproject(
    pixel: np.ndarray, depth: float, pose: Pose, intr: Intrinsics
) -> np.ndarray:
    """Lift a pixel at the given z-depth (meters) back to a world point."""
    if depth <= 0:
        raise ValueError(f"depth must be positive, got {depth}")
    u, v = np.asarray(pixel, dtype=np.float64).reshape(2)
    cam = np.array(
        [(u - intr.cx) / intr.fx * depth, (v - intr.cy) / intr.fy * depth, depth]
    )
    return pose.rotation.T @ (cam - pose.translation)


def pixel_ray(pixel: np.ndarray, pose: Pose, intr: Intrinsics) -> np.ndarray:
    """Unit viewing ray of a pixel in world coordinates."""
    u, v = np.asarray(pixel, dtype=np.float64).reshape(2)
    cam = np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
    ray = pose.rotation.T @ cam
    return ray / np.linalg.norm(ray)


def triangulate(
    px1: np.ndarray,
    px2: np.ndarray,
    pose1: Pose,
    pose2: Pose,
    intr: Intrinsics,
) -> tuple[np.ndarray, float]:
    """Two-view linear (DLT) triangulation.

    Returns the world point minimizing the algebraic error and the mean
    reprojection error over both views in pixels.  Raises
    DegenerateGeometryError for zero baseline or near-parallel rays and
    CheiralityError when the point falls behind either camera.
    """
    baseline = np.linalg.norm(pose1.camera_center() - pose2.camera_center())
    if baseline <= 0:
        raise DegenerateGeometryError("identical camera centers (zero baseline)")
    r1 = pixel_ray(px1, pose1, intr)
    r2 = pixel_ray(px2, pose2, intr)
    cosang = np.clip(abs(float(r1 @ r2)), -1.0, 1.0)
    angle_deg = np.degrees(np.arccos(cosang))
    if angle_deg < MIN_RAY_ANGLE_DEG:
        raise DegenerateGeometryError(
            f"rays nearly parallel ({angle_deg:.4f} deg < {MIN_RAY_ANGLE_DEG} deg)"
        )

    k = intr.matrix()
    p1 = k @ np.hstack([pose1.rotation, pose1.translation[:, None]])
    p2 = k @ np.hstack([pose2.rotation, pose2.translation[:, None]])
    u1, v1 = np.asarray(px1, dtype=np.float64).reshape(2)
    u2, v2 = np.asarray(px2, dtype=np.float64).reshape(2)
    a = np.stack(
        [
            u1 * p1[2] - p1[0],
            v1 * p1[2] - p1[1],
            u2 * p2[2] - p2[0],
            v2 * p2[2] - p2[1],
        ]
    )
    _, _, vt = np.linalg.svd(a)
    hom = vt[-1]
    if abs(hom[3]) < 1e-15:
        raise DegenerateGeometryError("triangulated point at infinity")
    point = hom[:3] / hom[3]

    for pose, px in ((pose1, px1), (pose2, px2)):
        if pose.transform(point)[2] <= 0:
            raise CheiralityError("triangulated point behind a camera")
    e1 = np.linalg.norm(project(point, pose1, intr) - np.asarray(px1, dtype=np.float64))
    e2 = np.linalg.norm(project(point, pose2, intr) - np.asarray(px2, dtype=np.float64))
    return point, float(0.5 * (e1 + e2))

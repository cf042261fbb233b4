"""Camera pose from 2D-3D correspondences.

Minimal three-point solver (distance-ratio formulation reduced to a
quartic), robust hypothesize-and-verify estimation around it, and
Gauss-Newton refinement of reprojection error over a local rigid-motion
parameterization.  All randomness is owned by a caller-provided seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import Polynomial
from scipy.spatial.transform import Rotation

from .errors import PoseEstimationError
from .geometry import Intrinsics, Pose, project_points

_REAL_ROOT_TOL = 1e-8


@dataclass(frozen=True)
class RansacConfig:
    """Knobs for the hypothesize-and-verify loop."""

    max_iterations: int = 1000
    inlier_threshold_px: float = 3.0
    confidence: float = 0.999
    seed: int = 0
    min_inliers: int = 4

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.inlier_threshold_px <= 0:
            raise ValueError("inlier_threshold_px must be positive")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        if self.min_inliers < 4:
            raise ValueError("min_inliers must be >= 4")


@dataclass(frozen=True)
class RefinementResult:
    pose: Pose
    iterations: int
    mean_reprojection_px: float
    singular: bool  # normal equations unsolvable; pose is the unrefined input


def _absolute_orientation(world: np.ndarray, camera: np.ndarray) -> Pose:
    """Rigid transform taking world points onto camera-frame points.

    Least-squares rotation via SVD of the cross-covariance, reflection
    excluded by the determinant correction.
    """
    wc = world.mean(axis=0)
    cc = camera.mean(axis=0)
    h = (world - wc).T @ (camera - cc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return Pose(rotation=rot, translation=cc - rot @ wc)


def solve_p3p(points: np.ndarray, bearings: np.ndarray) -> list[Pose]:
    """Camera poses consistent with 3 world points and their view rays.

    ``points`` is (3, 3) world coordinates, ``bearings`` (3, 3) unit rays
    in the camera frame.  Up to four solutions; degenerate triples
    (collinear points, coincident rays) yield an empty list.
    """
    points = np.asarray(points, dtype=np.float64)
    bearings = np.asarray(bearings, dtype=np.float64)
    if points.shape != (3, 3) or bearings.shape != (3, 3):
        raise ValueError("solve_p3p needs exactly 3 points and 3 bearings")

    d12 = np.linalg.norm(points[0] - points[1])
    d13 = np.linalg.norm(points[0] - points[2])
    d23 = np.linalg.norm(points[1] - points[2])
    if min(d12, d13, d23) < 1e-12:
        return []
    c12 = float(bearings[0] @ bearings[1])
    c13 = float(bearings[0] @ bearings[2])
    c23 = float(bearings[1] @ bearings[2])

    # Distances s_i to the camera satisfy, with u = s2/s1 and v = s3/s1,
    # two quadratics in u whose v-dependent coefficients share the leading
    # term; eliminating u leaves a quartic in v.
    v = Polynomial([0.0, 1.0])
    q13 = 1.0 - 2.0 * c13 * v + v * v  # (1 + v^2 - 2 v cos13)
    b1 = Polynomial([-2.0 * d13**2 * c12])
    c1 = d13**2 - d12**2 * q13
    b2 = -2.0 * d13**2 * c23 * v
    c2 = d13**2 * v * v - d23**2 * q13
    a = Polynomial([d13**2])

    db = b1 - b2
    dc = c2 - c1
    quartic = a * dc * dc + b1 * dc * db + c1 * db * db

    coeffs = np.trim_zeros(quartic.coef, "b")
    if len(coeffs) <= 1:
        return []
    roots = Polynomial(coeffs).roots()

    poses = []
    for root in roots:
        if abs(root.imag) > _REAL_ROOT_TOL * (1.0 + abs(root.real)):
            continue
        vv = float(root.real)
        if vv <= 0:
            continue
        denom = db(vv)
        if abs(denom) < 1e-12 * max(1.0, abs(dc(vv))):
            continue
        uu = dc(vv) / denom
        if uu <= 0:
            continue
        s1_sq = d12**2 / (1.0 + uu * uu - 2.0 * uu * c12)
        if s1_sq <= 0:
            continue
        s1 = np.sqrt(s1_sq)
        cam = np.array([s1, uu * s1, vv * s1])[:, None] * bearings
        pose = _absolute_orientation(points, cam)
        # resubstitution guard: the triple must actually map onto its rays
        fit = pose.transform(points)
        norms = np.linalg.norm(fit, axis=1)
        if np.any(norms < 1e-12):
            continue
        if np.max(np.linalg.norm(fit / norms[:, None] - bearings, axis=1)) > 1e-6:
            continue
        if not any(np.allclose(p.translation, pose.translation, atol=1e-9) for p in poses):
            poses.append(pose)
    return poses


def _bearings(pixels: np.ndarray, intrinsics: Intrinsics) -> np.ndarray:
    x = (pixels[:, 0] - intrinsics.cx) / intrinsics.fx
    y = (pixels[:, 1] - intrinsics.cy) / intrinsics.fy
    rays = np.column_stack([x, y, np.ones(len(pixels))])
    return rays / np.linalg.norm(rays, axis=1, keepdims=True)


def _reprojection_errors(
    pose: Pose, points: np.ndarray, pixels: np.ndarray, intrinsics: Intrinsics
) -> np.ndarray:
    """Per-point pixel error; +inf where the point falls behind the camera."""
    proj, depths = project_points(points, pose, intrinsics)
    err = np.linalg.norm(proj - pixels, axis=1)
    err[~np.isfinite(err)] = np.inf
    err[depths <= 0] = np.inf
    return err


def pnp_ransac(
    pixels: np.ndarray,
    points: np.ndarray,
    intrinsics: Intrinsics,
    config: RansacConfig = RansacConfig(),
) -> tuple[Pose, np.ndarray]:
    """Robust pose from matched pixels (N, 2) and world points (N, 3).

    Seeded and deterministic.  The iteration budget shrinks adaptively as
    the best inlier ratio grows.  Raises PoseEstimationError when fewer
    than 4 matches are given or no hypothesis reaches ``min_inliers``.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    n = len(pixels)
    if pixels.shape != (n, 2) or points.shape != (n, 3):
        raise ValueError(f"shape mismatch: pixels {pixels.shape}, points {points.shape}")
    if n < 4:
        raise PoseEstimationError(f"need at least 4 matches, got {n}")

    bearings = _bearings(pixels, intrinsics)
    rng = np.random.default_rng(config.seed)
    best_pose = None
    best_count = 0
    best_err = np.inf
    needed = config.max_iterations
    it = 0
    while it < min(needed, config.max_iterations):
        it += 1
        idx = rng.choice(n, size=3, replace=False)
        for pose in solve_p3p(points[idx], bearings[idx]):
            err = _reprojection_errors(pose, points, pixels, intrinsics)
            inl = err < config.inlier_threshold_px
            count = int(inl.sum())
            if count == 0:
                continue
            mean_err = float(err[inl].mean())
            if count > best_count or (count == best_count and mean_err < best_err):
                best_pose, best_count, best_err = pose, count, mean_err
                ratio = count / n
                if ratio >= 1.0:
                    needed = it
                else:
                    # iterations for one all-inlier minimal sample at confidence
                    denom = np.log1p(-(ratio**3))
                    if denom < 0:
                        needed = int(np.ceil(np.log(1.0 - config.confidence) / denom))
    if best_pose is None or best_count < config.min_inliers:
        raise PoseEstimationError(
            f"no hypothesis reached {config.min_inliers} inliers "
            f"(best {best_count} of {n})"
        )
    final_err = _reprojection_errors(best_pose, points, pixels, intrinsics)
    inlier_ids = np.flatnonzero(final_err < config.inlier_threshold_px)
    return best_pose, inlier_ids


def refine_pose(
    pose: Pose,
    pixels: np.ndarray,
    points: np.ndarray,
    intrinsics: Intrinsics,
    iterations: int = 10,
) -> RefinementResult:
    """Gauss-Newton descent of mean squared reprojection error.

    The update lives in the tangent space at the current pose (translation
    and rotation increments applied on the left); each accepted step
    re-orthonormalizes the rotation.  Steps that fail to decrease the
    objective are halved up to 12 times; singular normal equations return
    the input pose flagged.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    if len(pixels) < 4:
        raise ValueError(f"need at least 4 correspondences, got {len(pixels)}")

    def objective(p: Pose) -> float:
        err = _reprojection_errors(p, points, pixels, intrinsics)
        return float(np.mean(err**2)) if np.all(np.isfinite(err)) else np.inf

    current = pose
    cost = objective(current)
    its = 0
    for _ in range(iterations):
        cam = current.transform(points)
        z = cam[:, 2]
        if np.any(z <= 0):
            break
        proj, _ = project_points(points, current, intrinsics)
        resid = (proj - pixels).reshape(-1)  # (2N,)

        n = len(points)
        jac = np.zeros((2 * n, 6))
        fx, fy = intrinsics.fx, intrinsics.fy
        x, y = cam[:, 0], cam[:, 1]
        # d(pixel)/d(camera point)
        du = np.column_stack([fx / z, np.zeros(n), -fx * x / z**2])
        dv = np.column_stack([np.zeros(n), fy / z, -fy * y / z**2])
        # d(camera point)/d(translation increment) = I
        # d(camera point)/d(rotation increment) = -[cam]x
        cross = np.zeros((n, 3, 3))
        cross[:, 0, 1], cross[:, 0, 2] = -cam[:, 2], cam[:, 1]
        cross[:, 1, 0], cross[:, 1, 2] = cam[:, 2], -cam[:, 0]
        cross[:, 2, 0], cross[:, 2, 1] = -cam[:, 1], cam[:, 0]
        jac[0::2, :3] = du
        jac[1::2, :3] = dv
        jac[0::2, 3:] = -np.einsum("nk,nkj->nj", du, cross)
        jac[1::2, 3:] = -np.einsum("nk,nkj->nj", dv, cross)

        jtj = jac.T @ jac
        jtr = jac.T @ resid
        try:
            step = np.linalg.solve(jtj, -jtr)
        except np.linalg.LinAlgError:
            return RefinementResult(pose, its, float(np.sqrt(cost)), singular=True)
        if not np.all(np.isfinite(step)):
            return RefinementResult(pose, its, float(np.sqrt(cost)), singular=True)

        accepted = False
        scale = 1.0
        for _ in range(12):
            delta = step * scale
            rot_inc = Rotation.from_rotvec(delta[3:]).as_matrix()
            rot = rot_inc @ current.rotation
            # guard orthonormality against drift before constructing the pose
            u, _, vt = np.linalg.svd(rot)
            rot = u @ np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt))]) @ vt
            candidate = Pose(
                rotation=rot, translation=rot_inc @ current.translation + delta[:3]
            )
            new_cost = objective(candidate)
            if new_cost <= cost:
                current, cost = candidate, new_cost
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            break
        its += 1
        if np.linalg.norm(step * scale) < 1e-14:
            break
    return RefinementResult(current, its, float(np.sqrt(cost)), singular=False)

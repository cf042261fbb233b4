import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import random_pose
from sfploc.errors import CheiralityError, DegenerateGeometryError
from sfploc.geometry import Intrinsics, Pose, backproject, pixel_ray, project, project_points, triangulate
from sfploc.synthetic import default_intrinsics


# -- poses -----------------------------------------------------------------


def test_pose_rejects_non_rotations():
    with pytest.raises(ValueError):
        Pose(np.eye(3) * 2.0, np.zeros(3))
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))  # reflection
    with pytest.raises(ValueError):
        Pose(np.eye(2), np.zeros(3))


def test_pose_inverse_and_matrix_round_trip():
    pose = random_pose(0)
    comp = pose.inverse().matrix() @ pose.matrix()
    np.testing.assert_allclose(comp, np.eye(4), atol=1e-12)
    again = Pose.from_matrix(pose.matrix())
    np.testing.assert_allclose(again.rotation, pose.rotation)
    np.testing.assert_allclose(again.translation, pose.translation)


def test_camera_center_oracle():
    # with R = I the center is just -t
    pose = Pose(np.eye(3), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(pose.camera_center(), [-1.0, -2.0, -3.0])
    # transforming the center must land at the camera origin
    pose = random_pose(4)
    np.testing.assert_allclose(pose.transform(pose.camera_center()), np.zeros(3), atol=1e-12)


def test_intrinsics_validation_and_contains():
    with pytest.raises(ValueError):
        Intrinsics(fx=-1.0, fy=1.0, cx=0.0, cy=0.0, width=10, height=10)
    with pytest.raises(ValueError):
        Intrinsics(fx=1.0, fy=1.0, cx=20.0, cy=0.0, width=10, height=10)
    intr = Intrinsics(fx=100.0, fy=100.0, cx=5.0, cy=5.0, width=11, height=11)
    inside = intr.contains(np.array([[0.0, 0.0], [10.0, 10.0], [-0.1, 5.0], [5.0, 10.1]]))
    np.testing.assert_array_equal(inside, [True, True, False, False])


# -- projection round trips ------------------------------------------------


def test_project_backproject_identity(intr):
    """World -> pixel -> world and pixel -> world -> pixel, both < 1e-9."""
    rng = np.random.default_rng(2)
    for seed in range(20):
        pose = random_pose(seed)
        # points in front of this camera, inside a generous frustum
        cam = np.column_stack(
            [rng.uniform(-1, 1, 50), rng.uniform(-1, 1, 50), rng.uniform(1.0, 8.0, 50)]
        )
        world = cam @ pose.rotation - pose.rotation.T @ pose.translation
        pixels, depths = project_points(world, pose, intr)
        assert np.all(depths > 0)
        for px, z, w in zip(pixels, depths, world):
            lifted = backproject(px, float(z), pose, intr)
            assert np.linalg.norm(lifted - w) < 1e-9
            again = project(lifted, pose, intr)
            assert np.linalg.norm(again - px) < 1e-9


def test_project_raises_behind_camera(intr):
    pose = Pose.identity()
    with pytest.raises(CheiralityError):
        project(np.array([0.0, 0.0, -1.0]), pose, intr)


def test_backproject_rejects_nonpositive_depth(intr):
    with pytest.raises(ValueError):
        backproject(np.array([320.0, 240.0]), 0.0, Pose.identity(), intr)


def test_pixel_ray_is_unit_and_points_forward(intr):
    pose = random_pose(8)
    ray = pixel_ray(np.array([intr.cx, intr.cy]), pose, intr)
    assert np.linalg.norm(ray) == pytest.approx(1.0, abs=1e-12)
    # the principal point's ray is the camera's forward (z) axis in world frame
    np.testing.assert_allclose(ray, pose.rotation.T @ [0.0, 0.0, 1.0], atol=1e-12)


# -- triangulation ---------------------------------------------------------


def two_view(seed):
    rng = np.random.default_rng(seed)
    p1 = random_pose(seed)
    # second camera: same orientation nudged, center offset sideways ~1m
    delta = Rotation.from_rotvec(rng.uniform(-0.1, 0.1, 3)).as_matrix()
    r2 = delta @ p1.rotation
    c2 = p1.camera_center() + rng.uniform(-1.0, 1.0, 3)
    p2 = Pose(r2, -r2 @ c2)
    return p1, p2


def test_triangulate_recovers_noiseless_points(intr):
    for seed in range(30):
        p1, p2 = two_view(seed)
        rng = np.random.default_rng(seed + 1000)
        cam = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(2.0, 6.0)])
        world = p1.rotation.T @ (cam - p1.translation)
        if p2.transform(world)[2] <= 0:
            continue
        px1 = project(world, p1, intr)
        px2 = project(world, p2, intr)
        point, err = triangulate(px1, px2, p1, p2, intr)
        assert np.linalg.norm(point - world) < 1e-6
        assert err < 1e-6


def test_triangulate_zero_baseline_raises(intr):
    pose = random_pose(1)
    with pytest.raises(DegenerateGeometryError):
        triangulate(np.array([320.0, 240.0]), np.array([321.0, 240.0]), pose, pose, intr)


def test_triangulate_parallel_rays_raise(intr):
    # two cameras side by side, same pixel: rays are exactly parallel
    p1 = Pose.identity()
    p2 = Pose(np.eye(3), np.array([-1.0, 0.0, 0.0]))
    with pytest.raises(DegenerateGeometryError):
        triangulate(np.array([intr.cx, intr.cy]), np.array([intr.cx, intr.cy]), p1, p2, intr)


def test_triangulate_flags_points_behind_cameras(intr):
    # pixels generated from a point behind both cameras satisfy the same
    # algebraic equations, so the DLT recovers it; cheirality must reject it
    p1 = Pose.identity()
    p2 = Pose(np.eye(3), np.array([-1.0, 0.0, 0.0]))
    world = np.array([0.3, -0.2, -5.0])
    px1, _ = project_points(world, p1, intr)
    px2, _ = project_points(world, p2, intr)
    with pytest.raises(CheiralityError):
        triangulate(px1[0], px2[0], p1, p2, intr)


def test_default_intrinsics_sane():
    intr = default_intrinsics()
    assert intr.width == 640 and intr.height == 480
    assert intr.matrix()[0, 0] == intr.fx

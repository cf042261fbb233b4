"""Shared fixtures: synthetic scenes are expensive enough to build once."""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from sfploc.geometry import Intrinsics, Pose
from sfploc.synthetic import default_intrinsics, synth_scene


@pytest.fixture(scope="session")
def intr() -> Intrinsics:
    return default_intrinsics()


@pytest.fixture(scope="session")
def clean_scene():
    """Noiseless 12-frame scene: frames 0-7 for mapping, 8-11 as queries."""
    return synth_scene(seed=7, n_landmarks=200, n_frames=12)


@pytest.fixture(scope="session")
def noisy_scene():
    return synth_scene(seed=7, n_landmarks=200, n_frames=12, noise_px=1.0)


def random_pose(seed: int) -> Pose:
    """A camera a few meters from the origin, looking roughly at it."""
    rng = np.random.default_rng(seed)
    rot = Rotation.random(random_state=rng).as_matrix()
    t = rng.uniform(-0.5, 0.5, 3) + np.array([0.0, 0.0, 4.0])
    return Pose(rotation=rot, translation=t)

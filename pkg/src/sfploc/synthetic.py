"""Synthetic scenes with exact ground truth.

Landmarks live in a box; cameras sit on a surrounding circle looking at
its center.  Every quantity (pixels, depths, descriptors, correspond-
ences, outlier tags) is generated deterministically from one seed, so
tests can demand exact recovery: noiseless observations reproject to
zero error by construction.

Pixel noise models the localization precision of each pyramid level:
the requested sigma applies to the finest (stride-2) grid and grows
proportionally with stride on coarser ones, which is what makes
coarse-to-fine pose refinement genuinely informative.

Also provides homography pairs with planted correspondences (for
matching-accuracy evaluation) and smooth random images (for training).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .extraction import Keypoint, shorten_descriptor
from .geometry import Intrinsics, Pose
from .mapping import FrameObservations
from .pyramid import LevelSpec, default_level_specs

_BOX_HALF_EXTENTS = np.array([1.4, 1.4, 0.8])
_CAMERA_RADIUS = 4.0
_PIXEL_MARGIN = 8.0
_MIN_DEPTH = 0.5
_LEVEL_PRESENCE = (1.0, 0.8, 0.6)  # fraction of landmarks carrying each level


def default_intrinsics() -> Intrinsics:
    return Intrinsics(fx=525.0, fy=525.0, cx=320.0, cy=240.0, width=640, height=480)


@dataclass(frozen=True)
class SynthFrame:
    """One camera with its ground-truth pose and materialized keypoints.

    Per level, arrays are aligned with ``keypoints[level]``:
    ``landmark_index`` gives the planted correspondence, ``depths`` the
    true camera-frame depth, ``outlier_mask`` which pixels were replaced
    by uniform noise.
    """

    frame_id: int
    pose: Pose
    keypoints: dict[int, list[Keypoint]]
    depths: dict[int, np.ndarray]
    landmark_index: dict[int, np.ndarray]
    outlier_mask: dict[int, np.ndarray]
    global_descriptor: np.ndarray


@dataclass(frozen=True)
class SynthScene:
    seed: int
    landmarks: np.ndarray  # (N, 3) float64
    descriptors: dict[int, np.ndarray]  # level -> (N, d) unit rows
    presence: dict[int, np.ndarray]  # level -> (N,) bool
    frames: tuple[SynthFrame, ...]
    intrinsics: Intrinsics
    level_specs: tuple[LevelSpec, ...]
    noise_px: float
    outlier_rate: float
    descriptor_noise: float

    @property
    def diameter(self) -> float:
        """Scene extent: largest landmark-to-landmark distance."""
        lo = self.landmarks.min(axis=0)
        hi = self.landmarks.max(axis=0)
        return float(np.linalg.norm(hi - lo))


def _look_at(center: np.ndarray, target: np.ndarray) -> Pose:
    """Camera-from-world pose for a camera at ``center`` facing ``target``."""
    forward = target - center
    forward = forward / np.linalg.norm(forward)
    right = np.cross([0.0, 0.0, 1.0], forward)
    nr = np.linalg.norm(right)
    if nr < 1e-9:  # looking straight up/down: pick any horizontal right axis
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nr
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    return Pose(rotation=rot, translation=-rot @ center)


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _frame_global(pose: Pose) -> np.ndarray:
    center = pose.camera_center()
    forward = pose.rotation[2]
    g = np.concatenate([center / _CAMERA_RADIUS, forward, [1.0, 0.0]])
    return (g / np.linalg.norm(g)).astype(np.float64)


def synth_scene(
    seed: int,
    n_landmarks: int = 200,
    n_frames: int = 8,
    noise_px: float = 0.0,
    outlier_rate: float = 0.0,
    descriptor_noise: float = 0.0,
    level_specs: tuple[LevelSpec, ...] | None = None,
) -> SynthScene:
    """Generate a deterministic scene; same seed, same scene, bit for bit."""
    if n_landmarks < 10:
        raise ValueError("need at least 10 landmarks")
    if n_frames < 2:
        raise ValueError("need at least 2 frames")
    if not 0.0 <= outlier_rate < 1.0:
        raise ValueError("outlier_rate must lie in [0, 1)")
    specs = tuple(level_specs) if level_specs is not None else tuple(default_level_specs())
    rng = np.random.default_rng(seed)
    intr = default_intrinsics()

    landmarks = rng.uniform(-1.0, 1.0, size=(n_landmarks, 3)) * _BOX_HALF_EXTENTS
    descriptors = {}
    presence = {}
    for spec, frac in zip(specs, _LEVEL_PRESENCE):
        descriptors[spec.level_index] = _unit_rows(rng, n_landmarks, spec.dim)
        keep = rng.random(n_landmarks) < frac if frac < 1.0 else np.ones(n_landmarks, bool)
        presence[spec.level_index] = keep

    frames = []
    visible_count = np.zeros(n_landmarks, dtype=int)
    for k in range(n_frames):
        angle = 2.0 * np.pi * k / n_frames
        center = np.array(
            [
                _CAMERA_RADIUS * np.cos(angle),
                _CAMERA_RADIUS * np.sin(angle),
                rng.uniform(-0.3, 0.3),
            ]
        )
        pose = _look_at(center, np.zeros(3))
        cam = pose.transform(landmarks)
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            px = np.column_stack(
                [
                    intr.fx * cam[:, 0] / z + intr.cx,
                    intr.fy * cam[:, 1] / z + intr.cy,
                ]
            )
        visible = (
            (z > _MIN_DEPTH)
            & (px[:, 0] >= _PIXEL_MARGIN)
            & (px[:, 0] <= intr.width - 1 - _PIXEL_MARGIN)
            & (px[:, 1] >= _PIXEL_MARGIN)
            & (px[:, 1] <= intr.height - 1 - _PIXEL_MARGIN)
        )
        idx = np.flatnonzero(visible)
        visible_count[idx] += 1

        keypoints: dict[int, list[Keypoint]] = {}
        depths: dict[int, np.ndarray] = {}
        lm_index: dict[int, np.ndarray] = {}
        out_mask: dict[int, np.ndarray] = {}
        for spec in specs:
            lvl = spec.level_index
            rows = np.flatnonzero(presence[lvl][idx])
            lm_ids = idx[rows]
            observed_px = px[lm_ids].copy()
            # localization precision degrades with grid coarseness: noise
            # grows with the level's stride (noise_px applies at stride 2)
            sigma = noise_px * spec.stride / 2.0
            if sigma > 0:
                observed_px += rng.normal(0.0, sigma, size=observed_px.shape)
            outliers = np.zeros(len(lm_ids), dtype=bool)
            if outlier_rate > 0:
                outliers = rng.random(len(lm_ids)) < outlier_rate
                for j in np.flatnonzero(outliers):
                    observed_px[j] = [
                        rng.uniform(_PIXEL_MARGIN, intr.width - 1 - _PIXEL_MARGIN),
                        rng.uniform(_PIXEL_MARGIN, intr.height - 1 - _PIXEL_MARGIN),
                    ]
            kps = []
            for j, lm in enumerate(lm_ids):
                desc = descriptors[lvl][lm]
                if descriptor_noise > 0:
                    desc = desc + rng.normal(0.0, descriptor_noise, size=len(desc))
                    desc = desc / np.linalg.norm(desc)
                kps.append(
                    Keypoint(
                        level=lvl,
                        pixel=(float(observed_px[j, 0]), float(observed_px[j, 1])),
                        score=float(0.6 + 0.4 * rng.random()),
                        descriptor=np.asarray(desc, dtype=np.float64),
                    )
                )
            keypoints[lvl] = kps
            depths[lvl] = z[lm_ids].astype(np.float64)
            lm_index[lvl] = lm_ids.copy()
            out_mask[lvl] = outliers.copy()

        frames.append(
            SynthFrame(
                frame_id=k,
                pose=pose,
                keypoints=keypoints,
                depths=depths,
                landmark_index=lm_index,
                outlier_mask=out_mask,
                global_descriptor=_frame_global(pose),
            )
        )

    coverage = float(np.mean(visible_count >= 2))
    if coverage < 0.9:
        raise RuntimeError(
            f"scene generation produced poor coverage ({coverage:.0%} of landmarks "
            "seen by >= 2 frames); adjust geometry parameters"
        )
    return SynthScene(
        seed=seed,
        landmarks=landmarks,
        descriptors=descriptors,
        presence=presence,
        frames=tuple(frames),
        intrinsics=intr,
        level_specs=specs,
        noise_px=noise_px,
        outlier_rate=outlier_rate,
        descriptor_noise=descriptor_noise,
    )


def frame_observations(
    scene: SynthScene, frame_ids: list[int], mode: str = "full"
) -> list[FrameObservations]:
    """Package frames as map-builder input (with exact per-keypoint depth)."""
    by_id = {f.frame_id: f for f in scene.frames}
    out = []
    for fid in frame_ids:
        f = by_id[fid]
        kps = f.keypoints
        if mode == "short":
            kps = {
                lvl: [
                    Keypoint(k.level, k.pixel, k.score, shorten_descriptor(k.descriptor))
                    for k in lst
                ]
                for lvl, lst in kps.items()
            }
        out.append(
            FrameObservations(
                frame_id=f.frame_id,
                keypoints=kps,
                pose=f.pose,
                intrinsics=scene.intrinsics,
                global_descriptor=f.global_descriptor.astype(np.float32),
                depths=f.depths,
            )
        )
    return out


# -- homography pairs ------------------------------------------------------


@dataclass(frozen=True)
class HomographyPair:
    """Planted correspondences related by a ground-truth homography."""

    homography: np.ndarray  # (3, 3), maps image-a pixels to image-b
    points_a: np.ndarray  # (M, 2) exact
    points_b: np.ndarray  # (M, 2) observed (noise applied)

    def __post_init__(self):
        h = np.asarray(self.homography, dtype=np.float64)
        if h.shape != (3, 3) or abs(h[2, 2]) < 1e-12:
            raise ValueError("homography must be 3x3 with nonzero scale")
        object.__setattr__(self, "homography", h / h[2, 2])


def apply_homography(h: np.ndarray, points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    hom = np.column_stack([pts, np.ones(len(pts))]) @ h.T
    return hom[:, :2] / hom[:, 2:3]


def synth_homography_pairs(
    seed: int,
    n_pairs: int = 20,
    n_points: int = 100,
    noise_px: float = 0.5,
    image_size: tuple[int, int] = (640, 480),
) -> list[HomographyPair]:
    """Random mild perspective warps with noisy planted matches."""
    rng = np.random.default_rng(seed)
    w, h = image_size
    pairs = []
    for _ in range(n_pairs):
        # similarity + small projective part, keeping points well inside frame
        angle = rng.uniform(-0.3, 0.3)
        scale = rng.uniform(0.9, 1.1)
        tx, ty = rng.uniform(-30, 30, size=2)
        ca, sa = np.cos(angle) * scale, np.sin(angle) * scale
        hom = np.array(
            [
                [ca, -sa, tx],
                [sa, ca, ty],
                [rng.uniform(-5e-5, 5e-5), rng.uniform(-5e-5, 5e-5), 1.0],
            ]
        )
        pts_a = np.column_stack(
            [rng.uniform(0.2 * w, 0.8 * w, n_points), rng.uniform(0.2 * h, 0.8 * h, n_points)]
        )
        pts_b = apply_homography(hom, pts_a)
        if noise_px > 0:
            pts_b = pts_b + rng.normal(0.0, noise_px, size=pts_b.shape)
        pairs.append(HomographyPair(homography=hom, points_a=pts_a, points_b=pts_b))
    return pairs


def planted_matcher(pair: HomographyPair) -> tuple[np.ndarray, np.ndarray]:
    """The matcher that returns exactly the planted correspondences."""
    return pair.points_a, pair.points_b


# -- training images -------------------------------------------------------


def synth_images(
    seed: int, count: int = 4, size: int = 32, channels: int = 1
) -> np.ndarray:
    """Smooth random blob images in [0, 1], shape (count, size, size, channels)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.zeros((count, size, size, channels))
    for i in range(count):
        for c in range(channels):
            img = np.zeros((size, size))
            for _ in range(6):
                cx, cy = rng.uniform(0, size, size=2)
                sigma = rng.uniform(size / 10, size / 3)
                amp = rng.uniform(-1.0, 1.0)
                img += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2))
            lo, hi = img.min(), img.max()
            images[i, :, :, c] = (img - lo) / (hi - lo) if hi > lo else 0.5
    return images

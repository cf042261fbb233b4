"""Adapters for on-disk scene layouts.

A "posed directory" holds numbered frames with 4x4 camera-to-world pose
matrices (the common RGB-D dataset convention), keypoint files, optional
per-keypoint depth archives, optional global descriptors, and one shared
intrinsics file:

    intrinsics.yaml            fx, fy, cx, cy, width, height
    frame-000.pose.txt         4x4 row-major camera-to-world
    frame-000.sfpk             keypoints (see extraction module)
    frame-000.depth.npz        level_<i> -> depths aligned with keypoints
    frame-000.global.npy       global descriptor vector
    landmarks.npy              (optional) reference 3D points

Sequence directories for homography evaluation hold image pairs and
H_a_b matrix files.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .errors import FormatError
from .extraction import Keypoint, read_keypoints
from .geometry import Intrinsics, Pose
from .mapping import FrameObservations

_FRAME_RE = re.compile(r"^frame-(\d+)\.pose\.txt$")


def save_intrinsics(intr: Intrinsics, path: Path) -> None:
    payload = {
        "fx": float(intr.fx),
        "fy": float(intr.fy),
        "cx": float(intr.cx),
        "cy": float(intr.cy),
        "width": int(intr.width),
        "height": int(intr.height),
    }
    Path(path).write_text(yaml.safe_dump(payload, sort_keys=True), encoding="utf-8")


def load_intrinsics(path: Path) -> Intrinsics:
    try:
        payload = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        return Intrinsics(
            fx=float(payload["fx"]),
            fy=float(payload["fy"]),
            cx=float(payload["cx"]),
            cy=float(payload["cy"]),
            width=int(payload["width"]),
            height=int(payload["height"]),
        )
    except (KeyError, TypeError, ValueError, yaml.YAMLError) as exc:
        raise FormatError(f"{path}: bad intrinsics file ({exc})") from exc


def save_pose(pose: Pose, path: Path) -> None:
    """Write the camera-to-world 4x4 (the inverse of our internal form)."""
    np.savetxt(path, pose.inverse().matrix(), fmt="%.17g")


def load_pose(path: Path) -> Pose:
    """Read a camera-to-world 4x4 and return the camera-from-world pose."""
    mat = np.loadtxt(path, dtype=np.float64)
    if mat.shape != (4, 4):
        raise FormatError(f"{path}: expected a 4x4 pose matrix, got {mat.shape}")
    try:
        return Pose.from_matrix(mat).inverse()
    except ValueError as exc:
        raise FormatError(f"{path}: invalid pose ({exc})") from exc


@dataclass(frozen=True)
class PosedFrame:
    frame_id: int
    pose: Pose  # camera-from-world
    keypoints: dict[int, list[Keypoint]]
    depths: dict[int, np.ndarray] | None
    global_descriptor: np.ndarray | None


def list_frame_ids(directory: Path) -> list[int]:
    ids = []
    for entry in Path(directory).iterdir():
        m = _FRAME_RE.match(entry.name)
        if m:
            ids.append(int(m.group(1)))
    return sorted(ids)


def load_posed_frame(directory: Path, frame_id: int) -> PosedFrame:
    directory = Path(directory)
    stem = directory / f"frame-{frame_id:03d}"
    pose = load_pose(stem.with_suffix(".pose.txt"))
    kp_path = stem.with_suffix(".sfpk")
    keypoints: dict[int, list[Keypoint]] = {}
    if kp_path.exists():
        keypoints = read_keypoints(kp_path)
    depths = None
    depth_path = stem.with_suffix(".depth.npz")
    if depth_path.exists():
        with np.load(depth_path) as payload:
            depths = {
                int(name.split("_", 1)[1]): payload[name].astype(np.float64)
                for name in payload.files
                if name.startswith("level_")
            }
    global_path = stem.with_suffix(".global.npy")
    global_desc = np.load(global_path) if global_path.exists() else None
    return PosedFrame(
        frame_id=frame_id,
        pose=pose,
        keypoints=keypoints,
        depths=depths,
        global_descriptor=global_desc,
    )


def load_posed_directory(
    directory: Path, frame_ids: list[int] | None = None
) -> tuple[Intrinsics, list[PosedFrame]]:
    directory = Path(directory)
    intr = load_intrinsics(directory / "intrinsics.yaml")
    ids = frame_ids if frame_ids is not None else list_frame_ids(directory)
    if not ids:
        raise FormatError(f"{directory}: no frame-*.pose.txt files found")
    return intr, [load_posed_frame(directory, i) for i in ids]


def frames_to_observations(frames: list[PosedFrame], intr: Intrinsics) -> list[FrameObservations]:
    out = []
    for f in frames:
        g = None
        if f.global_descriptor is not None:
            g = f.global_descriptor.astype(np.float32)
        out.append(
            FrameObservations(
                frame_id=f.frame_id,
                keypoints=f.keypoints,
                pose=f.pose,
                intrinsics=intr,
                global_descriptor=g,
                depths=f.depths,
            )
        )
    return out


# -- homography sequences --------------------------------------------------

_H_RE = re.compile(r"^H_(\d+)_(\d+)(?:\.txt)?$")


def load_homography_file(path: Path) -> np.ndarray:
    mat = np.loadtxt(path, dtype=np.float64)
    if mat.shape != (3, 3):
        raise FormatError(f"{path}: expected a 3x3 homography, got {mat.shape}")
    return mat


def list_homography_pairs(directory: Path) -> list[tuple[int, int, Path]]:
    """(index_a, index_b, matrix path) for every H_a_b file present."""
    out = []
    for entry in sorted(Path(directory).iterdir()):
        m = _H_RE.match(entry.name)
        if m:
            out.append((int(m.group(1)), int(m.group(2)), entry))
    return out

"""Hierarchical localization: retrieve, match, estimate, tighten.

A query's deepest-level descriptors are matched against the landmarks
covisible with the top retrieved frames and robustly lifted to a first
pose.  Each shallower level then re-matches under that pose prior —
candidate landmarks must reproject within a shrinking pixel radius —
and the pose is re-estimated and refined, producing a deep-to-shallow
trace of increasingly constrained poses.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import PoseEstimationError
from .extraction import Keypoint
from .geometry import Intrinsics, Pose, project_points
from .mapping import MODE_FULL, MODE_SHORT, Landmark, LandmarkMap
from .pnp import RansacConfig, pnp_ransac, refine_pose
from .pyramid import DensePyramid


@dataclass(frozen=True)
class Match:
    query_index: int
    landmark_id: int
    similarity: float


@dataclass(frozen=True)
class MatchSet:
    """Best landmark per query keypoint at one level (mutual best, floored)."""

    level: int
    matches: tuple[Match, ...]
    gating_radius_px: float  # inf when ungated

    def __post_init__(self):
        seen_q = set()
        seen_l = set()
        for m in self.matches:
            if not -1.0 - 1e-9 <= m.similarity <= 1.0 + 1e-9:
                raise ValueError(f"similarity {m.similarity} outside [-1, 1]")
            if m.query_index in seen_q or m.landmark_id in seen_l:
                raise ValueError("matches must be one-to-one")
            seen_q.add(m.query_index)
            seen_l.add(m.landmark_id)
        object.__setattr__(self, "matches", tuple(self.matches))

    def __len__(self) -> int:
        return len(self.matches)


@dataclass(frozen=True)
class TraceEntry:
    level: int
    pose: Pose
    inliers: int
    mean_reprojection_px: float


@dataclass(frozen=True)
class LocalizationResult:
    query_id: int
    trace: tuple[TraceEntry, ...]
    success: bool
    elapsed_s: float = 0.0

    @property
    def final_pose(self) -> Pose | None:
        return self.trace[-1].pose if self.trace else None


@dataclass(frozen=True)
class LocalizerConfig:
    """Pipeline knobs; gating radii must not grow as levels get finer."""

    top_k: int = 3
    similarity_floor: float = 0.5
    gating_radius_px: tuple[float, ...] = (math.inf, 8.0, 4.0)  # deep -> shallow
    ransac: RansacConfig = field(default_factory=RansacConfig)
    refine_iterations: int = 10
    min_inliers: int = 6
    descriptor_mode: str = MODE_FULL

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not -1.0 <= self.similarity_floor <= 1.0:
            raise ValueError("similarity_floor must lie in [-1, 1]")
        if any(r <= 0 for r in self.gating_radius_px):
            raise ValueError("gating radii must be positive")
        if any(b > a for a, b in zip(self.gating_radius_px, self.gating_radius_px[1:])):
            raise ValueError("gating radii must be non-increasing deep -> shallow")
        if self.min_inliers < 4:
            raise ValueError("min_inliers must be >= 4")
        if self.descriptor_mode not in (MODE_FULL, MODE_SHORT):
            raise ValueError(f"unknown descriptor mode {self.descriptor_mode!r}")

    def radius_for(self, depth_rank: int) -> float:
        """Gating radius for the depth_rank-th level processed (0 = deepest)."""
        if depth_rank < len(self.gating_radius_px):
            return self.gating_radius_px[depth_rank]
        return self.gating_radius_px[-1]


# -- retrieval -------------------------------------------------------------


def global_descriptor(pyramid: DensePyramid) -> np.ndarray:
    """Whole-image signature: mean-pooled deepest-level features, unit length.

    A degenerate all-zero pool is returned as the zero vector (cosine 0
    against everything) rather than raising.
    """
    deep = pyramid.deepest
    pooled = deep.values.mean(axis=(0, 1))
    norm = np.linalg.norm(pooled)
    if norm < 1e-12:
        return np.zeros_like(pooled)
    return pooled / norm


def retrieve(query_descriptor: np.ndarray, landmark_map: LandmarkMap, k: int) -> list[int]:
    """Frame ids of the k most similar mapped frames (cosine, ties by id)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not landmark_map.frames:
        raise ValueError("cannot retrieve from a map with no frames")
    q = np.asarray(query_descriptor, dtype=np.float64)
    scored = []
    for fr in landmark_map.frames:
        g = fr.global_descriptor.astype(np.float64)
        if len(g) != len(q):
            raise ValueError(
                f"query descriptor dim {len(q)} != stored dim {len(g)}"
            )
        denom = np.linalg.norm(q) * np.linalg.norm(g)
        sim = float(q @ g / denom) if denom > 1e-12 else 0.0
        scored.append((-sim, fr.frame_id))
    scored.sort()
    return [fid for _, fid in scored[:k]]


def covisible_landmarks(landmark_map: LandmarkMap, frame_ids: list[int]) -> list[Landmark]:
    """Union of the landmarks observed by the given frames, id-ordered."""
    wanted = set(frame_ids)
    ids: set[int] = set()
    for fr in landmark_map.frames:
        if fr.frame_id in wanted:
            ids.update(fr.landmark_ids)
    return [landmark_map.landmarks[i] for i in sorted(ids)]


# -- matching --------------------------------------------------------------


def _descriptor_matrix(
    landmarks: list[Landmark], level: int
) -> tuple[np.ndarray, np.ndarray]:
    """(ids, stacked slices) for landmarks present at the level."""
    ids = [lm.landmark_id for lm in landmarks if level in lm.slices]
    if not ids:
        return np.array([], dtype=int), np.zeros((0, 0))
    mat = np.stack(
        [lm.slices[level].astype(np.float64) for lm in landmarks if level in lm.slices]
    )
    return np.asarray(ids), mat


def _select_matches(
    sim: np.ndarray, lm_ids: np.ndarray, floor: float, level: int, radius: float
) -> MatchSet:
    """Mutual-best pairs above the floor from a (queries x landmarks) table.

    Entries of -inf mark forbidden (out-of-gate) pairs.
    """
    matches = []
    if sim.size:
        best_lm = sim.argmax(axis=1)
        best_q = sim.argmax(axis=0)
        for qi, li in enumerate(best_lm):
            s = sim[qi, li]
            if s == -np.inf or s < floor:
                continue
            if best_q[li] != qi:
                continue
            # float32 storage can push a unit-vector cosine epsilon past 1
            matches.append(Match(qi, int(lm_ids[li]), float(np.clip(s, -1.0, 1.0))))
    return MatchSet(level=level, matches=tuple(matches), gating_radius_px=radius)


def match_level(
    query_keypoints: list[Keypoint],
    landmarks: list[Landmark],
    level: int,
    floor: float = 0.5,
) -> MatchSet:
    """Ungated mutual-best cosine matching at one pyramid level."""
    lm_ids, lm_desc = _descriptor_matrix(landmarks, level)
    if len(lm_ids) == 0 or not query_keypoints:
        return MatchSet(level=level, matches=(), gating_radius_px=math.inf)
    q = np.stack([kp.descriptor for kp in query_keypoints])
    if q.shape[1] != lm_desc.shape[1]:
        raise ValueError(
            f"descriptor dim mismatch at level {level}: query {q.shape[1]}, "
            f"map {lm_desc.shape[1]} (check full/short mode)"
        )
    return _select_matches(q @ lm_desc.T, lm_ids, floor, level, math.inf)


def gated_match(
    query_keypoints: list[Keypoint],
    landmarks: list[Landmark],
    prior_pose: Pose,
    intrinsics: Intrinsics,
    radius_px: float,
    level: int,
    floor: float = 0.5,
) -> MatchSet:
    """Matching restricted to landmarks reprojecting near each keypoint.

    Under the prior pose, a landmark is a candidate for a keypoint only if
    it projects (in front of the camera) within ``radius_px`` of it; the
    usual mutual-best selection then runs on the gated similarity table.
    An empty candidate set is a valid empty result.
    """
    if radius_px <= 0:
        raise ValueError("radius_px must be positive")
    lm_ids, lm_desc = _descriptor_matrix(landmarks, level)
    if len(lm_ids) == 0 or not query_keypoints:
        return MatchSet(level=level, matches=(), gating_radius_px=radius_px)
    by_id = {lm.landmark_id: lm for lm in landmarks}
    positions = np.stack([by_id[i].position.astype(np.float64) for i in lm_ids])
    proj, depths = project_points(positions, prior_pose, intrinsics)
    pixels = np.stack([kp.pixel for kp in query_keypoints])
    q = np.stack([kp.descriptor for kp in query_keypoints])
    if q.shape[1] != lm_desc.shape[1]:
        raise ValueError(
            f"descriptor dim mismatch at level {level}: query {q.shape[1]}, "
            f"map {lm_desc.shape[1]} (check full/short mode)"
        )
    with np.errstate(invalid="ignore"):
        dist = np.linalg.norm(pixels[:, None, :] - proj[None, :, :], axis=2)
    ok = np.isfinite(dist) & (dist <= radius_px) & (depths[None, :] > 0)
    sim = np.where(ok, q @ lm_desc.T, -np.inf)
    return _select_matches(sim, lm_ids, floor, level, radius_px)


# -- pipeline --------------------------------------------------------------


def _correspondences(
    match_set: MatchSet, query_keypoints: list[Keypoint], landmark_map: LandmarkMap
) -> tuple[np.ndarray, np.ndarray]:
    px = np.stack([query_keypoints[m.query_index].pixel for m in match_set.matches])
    pts = np.stack(
        [landmark_map.landmarks[m.landmark_id].position.astype(np.float64) for m in match_set.matches]
    )
    return px, pts


def localize(
    query_id: int,
    query_keypoints: dict[int, list[Keypoint]],
    query_global: np.ndarray,
    landmark_map: LandmarkMap,
    intrinsics: Intrinsics,
    config: LocalizerConfig = LocalizerConfig(),
) -> LocalizationResult:
    """Coarse-to-fine pose estimation for one query.

    Never raises on pipeline failure: a result with ``success=False`` and
    a partial trace is returned instead (the descent stops at the first
    level that cannot produce a pose).
    """
    t0 = time.perf_counter()
    levels = sorted(query_keypoints, reverse=True)  # deep -> shallow
    trace: list[TraceEntry] = []

    def result(ok: bool) -> LocalizationResult:
        return LocalizationResult(
            query_id=query_id,
            trace=tuple(trace),
            success=ok,
            elapsed_s=time.perf_counter() - t0,
        )

    if not landmark_map.landmarks or not levels:
        return result(False)
    if landmark_map.mode != config.descriptor_mode:
        raise ValueError(
            f"map mode {landmark_map.mode!r} != configured mode {config.descriptor_mode!r}"
        )
    try:
        frame_ids = retrieve(query_global, landmark_map, config.top_k)
    except ValueError:
        return result(False)
    candidates = covisible_landmarks(landmark_map, frame_ids)
    if not candidates:
        return result(False)

    pose: Pose | None = None
    for rank, level in enumerate(levels):
        kps = query_keypoints[level]
        if pose is None:
            matches = match_level(kps, candidates, level, config.similarity_floor)
        else:
            matches = gated_match(
                kps, candidates, pose, intrinsics,
                config.radius_for(rank), level, config.similarity_floor,
            )
        if len(matches) < 4:
            break
        px, pts = _correspondences(matches, kps, landmark_map)
        try:
            est, inlier_ids = pnp_ransac(px, pts, intrinsics, config.ransac)
        except PoseEstimationError:
            break
        refined = refine_pose(
            est, px[inlier_ids], pts[inlier_ids], intrinsics, config.refine_iterations
        )
        pose = refined.pose
        trace.append(
            TraceEntry(
                level=level,
                pose=pose,
                inliers=len(inlier_ids),
                mean_reprojection_px=refined.mean_reprojection_px,
            )
        )
    ok = bool(trace) and trace[-1].inliers >= config.min_inliers
    return result(ok)


# -- reporting -------------------------------------------------------------


def _pose_record(pose: Pose) -> dict:
    # scipy orders quaternions (x, y, z, w); reports use (w, x, y, z)
    x, y, z, w = Rotation.from_matrix(pose.rotation).as_quat()
    return {
        "q_wxyz": [float(w), float(x), float(y), float(z)],
        "t": [float(v) for v in pose.translation],
    }


def result_to_record(res: LocalizationResult) -> dict:
    rec = {
        "query_id": res.query_id,
        "success": res.success,
        "elapsed_s": res.elapsed_s,
        "trace": [
            {
                "level": e.level,
                **_pose_record(e.pose),
                "inliers": e.inliers,
                "mean_reprojection_px": e.mean_reprojection_px,
            }
            for e in res.trace
        ],
    }
    if res.final_pose is not None:
        rec["final"] = _pose_record(res.final_pose)
    return rec


def write_report(results: list[LocalizationResult], path) -> None:
    """One JSON record per line, one line per query."""
    with open(path, "w", encoding="utf-8") as fh:
        for res in results:
            fh.write(json.dumps(result_to_record(res)) + "\n")


def record_to_pose(record: dict) -> Pose:
    """Inverse of ``_pose_record``: rebuild a Pose from a report entry."""
    w, x, y, z = record["q_wxyz"]
    rot = Rotation.from_quat([x, y, z, w]).as_matrix()
    return Pose(rotation=rot, translation=np.asarray(record["t"], dtype=np.float64))


def read_report(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records

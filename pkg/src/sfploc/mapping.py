"""Landmark map construction, compression accounting, and binary storage.

Keypoints from posed frames become 3D landmarks either by lifting with
per-keypoint depth or by triangulating verified two-view matches.  Each
landmark keeps one descriptor slice per pyramid level it was observed at
(deep to shallow on disk, with a presence bitmap); nearby duplicates are
merged by position/descriptor averaging.  The on-disk "SFPM" format is
little-endian and round-trips bit-exactly; ``map_stats`` accounts its
size to the byte.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import CheiralityError, DegenerateGeometryError, FormatError
from .extraction import Keypoint
from .geometry import Intrinsics, Pose, backproject, project_points, triangulate
from .pyramid import LevelSpec

MAP_MAGIC = b"SFPM"
MAP_VERSION = 1

MODE_FULL = "full"
MODE_SHORT = "short"
_MODE_CODES = {MODE_FULL: 0, MODE_SHORT: 1}
_MODE_NAMES = {v: k for k, v in _MODE_CODES.items()}


@dataclass(frozen=True)
class Landmark:
    """A 3D scene point with per-level descriptor slices.

    ``slices`` maps level index -> unit float32 vector; ``level`` is the
    deepest level the point was observed at.
    """

    landmark_id: int
    position: np.ndarray  # (3,) float32
    slices: dict[int, np.ndarray]
    observations: int = 1

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float32)
        if pos.shape != (3,):
            raise ValueError(f"position must be a 3-vector, got {pos.shape}")
        object.__setattr__(self, "position", pos)
        if not self.slices:
            raise ValueError("landmark needs at least one descriptor slice")
        slices = {}
        for lvl, vec in self.slices.items():
            v = np.asarray(vec, dtype=np.float32)
            if v.ndim != 1 or len(v) == 0:
                raise ValueError(f"slice at level {lvl} must be a nonempty vector")
            n = float(np.linalg.norm(v.astype(np.float64)))
            if abs(n - 1.0) > 1e-5:
                raise ValueError(f"slice at level {lvl} not unit length (|v| = {n})")
            slices[int(lvl)] = v
        object.__setattr__(self, "slices", slices)
        if self.observations < 1:
            raise ValueError("observations must be >= 1")

    @property
    def level(self) -> int:
        return max(self.slices)

    @property
    def presence(self) -> tuple[int, ...]:
        return tuple(sorted(self.slices))


@dataclass(frozen=True)
class MapFrame:
    """Retrieval record: a mapped frame's global descriptor + covisibility."""

    frame_id: int
    global_descriptor: np.ndarray  # float32, unit or zero
    landmark_ids: tuple[int, ...]

    def __post_init__(self):
        g = np.asarray(self.global_descriptor, dtype=np.float32)
        if g.ndim != 1 or len(g) == 0:
            raise ValueError("global descriptor must be a nonempty vector")
        object.__setattr__(self, "global_descriptor", g)
        object.__setattr__(self, "landmark_ids", tuple(int(i) for i in self.landmark_ids))


@dataclass(frozen=True)
class LandmarkMap:
    """Immutable landmark map; landmark ids are positional (0..n-1)."""

    level_specs: tuple[LevelSpec, ...]
    landmarks: tuple[Landmark, ...]
    frames: tuple[MapFrame, ...]
    mode: str = MODE_FULL

    def __post_init__(self):
        if self.mode not in _MODE_CODES:
            raise ValueError(f"mode must be one of {sorted(_MODE_CODES)}, got {self.mode!r}")
        if not self.level_specs:
            raise ValueError("need at least one level spec")
        if len(self.level_specs) > 8:
            raise ValueError("presence bitmap supports at most 8 levels")
        object.__setattr__(self, "level_specs", tuple(self.level_specs))
        object.__setattr__(self, "landmarks", tuple(self.landmarks))
        object.__setattr__(self, "frames", tuple(self.frames))
        dims = self.slice_dims()
        known = {s.level_index for s in self.level_specs}
        for i, lm in enumerate(self.landmarks):
            if lm.landmark_id != i:
                raise ValueError(f"landmark ids must be positional; index {i} holds id {lm.landmark_id}")
            for lvl, vec in lm.slices.items():
                if lvl not in known:
                    raise ValueError(f"landmark {i} has slice at unknown level {lvl}")
                if len(vec) != dims[lvl]:
                    raise ValueError(
                        f"landmark {i} level {lvl}: slice length {len(vec)} != {dims[lvl]}"
                    )
        for fr in self.frames:
            for lid in fr.landmark_ids:
                if not 0 <= lid < len(self.landmarks):
                    raise ValueError(f"frame {fr.frame_id} references unknown landmark {lid}")

    def slice_dims(self) -> dict[int, int]:
        """Stored slice length per level under the current mode."""
        full = {s.level_index: s.dim for s in self.level_specs}
        if self.mode == MODE_SHORT:
            return {lvl: d // 2 for lvl, d in full.items()}
        return full

    @property
    def global_dim(self) -> int:
        return len(self.frames[0].global_descriptor) if self.frames else 0


# -- construction ----------------------------------------------------------


@dataclass(frozen=True)
class FrameObservations:
    """Input to map building: extracted keypoints plus camera geometry.

    ``depths``, when present, gives metric depth per keypoint as
    {level: array aligned with that level's keypoint list}; frames
    without depth are lifted by two-view triangulation instead.
    """

    frame_id: int
    keypoints: dict[int, list[Keypoint]]
    pose: Pose
    intrinsics: Intrinsics
    global_descriptor: np.ndarray | None = None
    depths: dict[int, np.ndarray] | None = None

    def __post_init__(self):
        if self.depths is not None:
            for lvl, arr in self.depths.items():
                kps = self.keypoints.get(lvl, [])
                if len(arr) != len(kps):
                    raise ValueError(
                        f"frame {self.frame_id} level {lvl}: {len(arr)} depths "
                        f"for {len(kps)} keypoints"
                    )


@dataclass(frozen=True)
class MapConfig:
    merge_radius: float = 0.01  # meters
    triangulation_threshold_px: float = 2.0
    match_floor: float = 0.7

    def __post_init__(self):
        if self.merge_radius < 0:
            raise ValueError("merge_radius must be >= 0")
        if self.triangulation_threshold_px <= 0:
            raise ValueError("triangulation_threshold_px must be positive")


def _mutual_best(sim: np.ndarray) -> list[tuple[int, int]]:
    """(row, col) pairs that are each other's argmax."""
    if sim.size == 0:
        return []
    best_col = sim.argmax(axis=1)
    best_row = sim.argmax(axis=0)
    return [(r, c) for r, c in enumerate(best_col) if best_row[c] == r]


def _raw_landmarks_from_depth(
    frame: FrameObservations,
) -> list[tuple[np.ndarray, dict[int, np.ndarray], int]]:
    out = []
    for lvl in sorted(frame.keypoints):
        kps = frame.keypoints[lvl]
        depth_arr = (frame.depths or {}).get(lvl)
        if depth_arr is None:
            continue
        for kp, depth in zip(kps, depth_arr):
            if depth <= 0:
                continue
            point = backproject(np.asarray(kp.pixel), float(depth), frame.pose, frame.intrinsics)
            out.append((point, {lvl: np.asarray(kp.descriptor, dtype=np.float64)}, frame.frame_id))
    return out


def _raw_landmarks_from_pairs(
    frames: list[FrameObservations], config: MapConfig
) -> list[tuple[np.ndarray, dict[int, np.ndarray], tuple[int, int]]]:
    """Triangulate mutual-best descriptor matches between consecutive frames."""
    out = []
    for fa, fb in zip(frames, frames[1:]):
        for lvl in sorted(set(fa.keypoints) & set(fb.keypoints)):
            ka, kb = fa.keypoints[lvl], fb.keypoints[lvl]
            if not ka or not kb:
                continue
            da = np.stack([k.descriptor for k in ka])
            db = np.stack([k.descriptor for k in kb])
            for ia, ib in _mutual_best(da @ db.T):
                if float(da[ia] @ db[ib]) < config.match_floor:
                    continue
                try:
                    point, err = triangulate(
                        np.asarray(ka[ia].pixel), np.asarray(kb[ib].pixel),
                        fa.pose, fb.pose, fa.intrinsics,
                    )
                except (DegenerateGeometryError, CheiralityError):
                    continue
                if err > config.triangulation_threshold_px:
                    continue
                out.append(
                    (point, {lvl: np.asarray(ka[ia].descriptor, dtype=np.float64)},
                     (fa.frame_id, fb.frame_id))
                )
    return out


def _cluster(positions: np.ndarray, radius: float) -> list[list[int]]:
    """Connected components of the within-radius graph (order-stable)."""
    n = len(positions)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    if radius > 0 and n > 1:
        tree = cKDTree(positions)
        for a, b in sorted(tree.query_pairs(radius)):
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return [groups[root] for root in sorted(groups)]


def build_map(
    frames: list[FrameObservations],
    level_specs: list[LevelSpec],
    config: MapConfig = MapConfig(),
) -> LandmarkMap:
    """Lift every frame's keypoints to landmarks and assemble the map.

    Frames carrying depth contribute one landmark per keypoint; frames
    without depth are triangulated pairwise (consecutive order) from
    mutual-best descriptor matches.  Landmarks closer than
    ``config.merge_radius`` collapse into one (positions and slices
    averaged, presence unioned).
    """
    if not frames:
        raise ValueError("need at least one frame")
    with_depth = [f for f in frames if f.depths is not None]
    without = [f for f in frames if f.depths is None]
    raw: list[tuple[np.ndarray, dict[int, np.ndarray], tuple[int, ...]]] = []
    for f in with_depth:
        raw.extend((p, s, (fid,)) for p, s, fid in _raw_landmarks_from_depth(f))
    if without:
        if len(without) < 2:
            raise ValueError(
                "frames without depth cannot be lifted: need >= 2 such frames to triangulate"
            )
        raw.extend(_raw_landmarks_from_pairs(without, config))
    if not raw:
        raise ValueError("no valid landmarks could be constructed from the input frames")

    positions = np.stack([r[0] for r in raw])
    landmarks = []
    member_of: dict[int, int] = {}
    for new_id, group in enumerate(_cluster(positions, config.merge_radius)):
        for m in group:
            member_of[m] = new_id
        pos = positions[group].mean(axis=0)
        merged: dict[int, list[np.ndarray]] = {}
        for m in group:
            for lvl, vec in raw[m][1].items():
                merged.setdefault(lvl, []).append(vec)
        slices = {}
        for lvl, vecs in merged.items():
            mean = np.mean(vecs, axis=0)
            norm = np.linalg.norm(mean)
            slices[lvl] = (mean / norm if norm > 1e-12 else vecs[0]).astype(np.float32)
        landmarks.append(
            Landmark(
                landmark_id=new_id,
                position=pos.astype(np.float32),
                slices=slices,
                observations=len(group),
            )
        )

    seen_by_frame: dict[int, set[int]] = {f.frame_id: set() for f in frames}
    for m, (_, _, fids) in enumerate(raw):
        for fid in fids:
            seen_by_frame[fid].add(member_of[m])
    gdim = next(
        (len(f.global_descriptor) for f in frames if f.global_descriptor is not None), 1
    )
    map_frames = []
    for f in frames:
        g = f.global_descriptor
        if g is None:
            g = np.zeros(gdim, dtype=np.float32)
        map_frames.append(
            MapFrame(
                frame_id=f.frame_id,
                global_descriptor=g,
                landmark_ids=tuple(sorted(seen_by_frame[f.frame_id])),
            )
        )
    return LandmarkMap(
        level_specs=tuple(level_specs),
        landmarks=tuple(landmarks),
        frames=tuple(map_frames),
        mode=MODE_FULL,
    )


# -- descriptor shortening -------------------------------------------------


def shorten_descriptors(full_map: LandmarkMap) -> LandmarkMap:
    """Halve every descriptor slice (keep the leading components), renormalize.

    The stored payload shrinks by exactly a factor of two; positions,
    counts, and frame records are untouched.
    """
    if full_map.mode != MODE_FULL:
        raise ValueError("map is already in short mode")
    shortened = []
    for lm in full_map.landmarks:
        slices = {}
        for lvl, vec in lm.slices.items():
            half = vec[: len(vec) // 2].astype(np.float64)
            norm = np.linalg.norm(half)
            if norm < 1e-12:
                # all energy in the dropped half: fall back to a unit impulse
                half = np.zeros(len(vec) // 2)
                half[0] = 1.0
                norm = 1.0
            slices[lvl] = (half / norm).astype(np.float32)
        shortened.append(replace(lm, slices=slices))
    return replace(full_map, landmarks=tuple(shortened), mode=MODE_SHORT)


# -- size accounting -------------------------------------------------------

_HEADER_FMT = "<HBB II H"  # version, n_levels, mode, landmark count, frame count, global dim
_LM_FIXED_FMT = "<fffBB"  # position, level, presence bitmap


@dataclass(frozen=True)
class MapStats:
    header_bytes: int
    position_bytes: int
    record_overhead_bytes: int  # per-landmark level byte + presence bitmap
    descriptor_bytes_per_level: dict[int, int]
    frame_index_bytes: int
    total_bytes: int

    @property
    def descriptor_bytes(self) -> int:
        return sum(self.descriptor_bytes_per_level.values())


def map_stats(m: LandmarkMap) -> MapStats:
    """Exact byte accounting of the serialized form."""
    dims = m.slice_dims()
    header = len(MAP_MAGIC) + struct.calcsize(_HEADER_FMT) + 2 * len(m.level_specs)
    positions = 12 * len(m.landmarks)
    per_level = {lvl: 0 for lvl in dims}
    for lm in m.landmarks:
        for lvl in lm.slices:
            per_level[lvl] += 4 * dims[lvl]
    overhead = 2 * len(m.landmarks)
    frame_index = sum(4 + 4 * m.global_dim + 4 + 4 * len(f.landmark_ids) for f in m.frames)
    total = header + positions + overhead + sum(per_level.values()) + frame_index
    return MapStats(
        header_bytes=header,
        position_bytes=positions,
        record_overhead_bytes=overhead,
        descriptor_bytes_per_level=per_level,
        frame_index_bytes=frame_index,
        total_bytes=total,
    )


# -- serialization ---------------------------------------------------------


def serialize(m: LandmarkMap) -> bytes:
    out = bytearray()
    out += MAP_MAGIC
    out += struct.pack(
        _HEADER_FMT,
        MAP_VERSION,
        len(m.level_specs),
        _MODE_CODES[m.mode],
        len(m.landmarks),
        len(m.frames),
        m.global_dim,
    )
    for spec in m.level_specs:
        out += struct.pack("<H", spec.dim)
    dims = m.slice_dims()
    for lm in m.landmarks:
        bitmap = 0
        for lvl in lm.slices:
            bitmap |= 1 << (lvl - 1)
        out += struct.pack(_LM_FIXED_FMT, *map(float, lm.position), lm.level, bitmap)
        for lvl in sorted(lm.slices, reverse=True):  # deep -> shallow
            vec = lm.slices[lvl]
            if len(vec) != dims[lvl]:
                raise ValueError(f"slice length {len(vec)} != mode dim {dims[lvl]}")
            out += vec.astype("<f4").tobytes()
    for fr in m.frames:
        out += struct.pack("<I", fr.frame_id)
        g = fr.global_descriptor.astype("<f4")
        if len(g) != m.global_dim:
            raise ValueError("inconsistent global descriptor dimensions across frames")
        out += g.tobytes()
        out += struct.pack("<I", len(fr.landmark_ids))
        out += np.asarray(fr.landmark_ids, dtype="<u4").tobytes()
    return bytes(out)


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"truncated map: needed {n} bytes at offset {self.pos}, "
                f"have {len(self.buf) - self.pos}"
            )
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def deserialize(buf: bytes) -> LandmarkMap:
    cur = _Cursor(buf)
    if cur.take(4) != MAP_MAGIC:
        raise FormatError("not a landmark map: bad magic")
    version, n_levels, mode_code, n_landmarks, n_frames, global_dim = cur.unpack(_HEADER_FMT)
    if version != MAP_VERSION:
        raise FormatError(f"unsupported map version {version}")
    if mode_code not in _MODE_NAMES:
        raise FormatError(f"unknown descriptor mode code {mode_code}")
    if n_levels == 0:
        raise FormatError("map declares zero levels")
    full_dims = [cur.unpack("<H")[0] for _ in range(n_levels)]
    specs = tuple(
        LevelSpec(i + 1, 2 ** (i + 1), d) for i, d in enumerate(full_dims)
    )
    mode = _MODE_NAMES[mode_code]
    stored_dims = {
        s.level_index: (s.dim // 2 if mode == MODE_SHORT else s.dim) for s in specs
    }

    landmarks = []
    for i in range(n_landmarks):
        x, y, z, level, bitmap = cur.unpack(_LM_FIXED_FMT)
        present = [lvl for lvl in range(1, n_levels + 1) if bitmap & (1 << (lvl - 1))]
        if bitmap >> n_levels:
            raise FormatError(f"landmark {i}: presence bitmap has out-of-range levels")
        if not present:
            raise FormatError(f"landmark {i}: empty presence bitmap")
        if level != max(present):
            raise FormatError(
                f"landmark {i}: stored level {level} != deepest present {max(present)}"
            )
        slices = {}
        for lvl in sorted(present, reverse=True):
            raw = cur.take(4 * stored_dims[lvl])
            slices[lvl] = np.frombuffer(raw, dtype="<f4").copy()
        landmarks.append(
            Landmark(
                landmark_id=i,
                position=np.array([x, y, z], dtype=np.float32),
                slices=slices,
            )
        )
    frames = []
    for _ in range(n_frames):
        (frame_id,) = cur.unpack("<I")
        g = np.frombuffer(cur.take(4 * global_dim), dtype="<f4").copy()
        (n_ids,) = cur.unpack("<I")
        ids = np.frombuffer(cur.take(4 * n_ids), dtype="<u4")
        frames.append(
            MapFrame(frame_id=frame_id, global_descriptor=g, landmark_ids=tuple(int(v) for v in ids))
        )
    if cur.pos != len(buf):
        raise FormatError(f"{len(buf) - cur.pos} trailing bytes after map payload")
    try:
        return LandmarkMap(level_specs=specs, landmarks=tuple(landmarks), frames=tuple(frames), mode=mode)
    except ValueError as exc:
        raise FormatError(f"inconsistent map payload: {exc}") from exc


def save_map(m: LandmarkMap, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(m))


def load_map(path) -> LandmarkMap:
    with open(path, "rb") as fh:
        return deserialize(fh.read())

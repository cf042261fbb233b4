"""Inference-time keypoint extraction from a dense pyramid.

Pipeline per level: score threshold, non-maximal suppression, quadratic
sub-pixel refinement, cell-to-pixel mapping, bilinear descriptor
interpolation.  Extraction is deterministic; Bernoulli sampling is a
training-only device.

Cell (r, c) at a level with stride s covers pixels [c*s, (c+1)*s) x
[r*s, (r+1)*s) and has its center at ((c+0.5)*s, (r+0.5)*s).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter

from .errors import FormatError
from .pyramid import DensePyramid, FeatureGrid

KEYPOINT_MAGIC = b"SFPK"
KEYPOINT_VERSION = 1

# fixed LSQ system for fitting a + b*u + c*v + d*u^2 + e*u*v + f*v^2
# to the 3x3 neighborhood, u = column offset, v = row offset
_UV = np.array([(u, v) for v in (-1, 0, 1) for u in (-1, 0, 1)], dtype=np.float64)
_DESIGN = np.stack(
    [
        np.ones(9),
        _UV[:, 0],
        _UV[:, 1],
        _UV[:, 0] ** 2,
        _UV[:, 0] * _UV[:, 1],
        _UV[:, 1] ** 2,
    ],
    axis=1,
)
_DESIGN_PINV = np.linalg.pinv(_DESIGN)


@dataclass(frozen=True)
class Keypoint:
    """A detected keypoint with its level, sub-pixel position, and unit descriptor."""

    level: int
    pixel: tuple[float, float]  # (x, y) image coordinates
    score: float
    descriptor: np.ndarray

    def __post_init__(self):
        norm = float(np.linalg.norm(self.descriptor))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"descriptor must be unit length, |d| = {norm:.8f}")


@dataclass(frozen=True)
class ExtractConfig:
    """Knobs for keypoint extraction.

    ``nms_radius`` is in grid cells (an int for all levels or a per-level
    mapping); ``mode`` picks full-length or halved ("short") descriptors.
    """

    levels: tuple[int, ...] = (1, 2, 3)
    tau: float = 0.5
    nms_radius: int | dict[int, int] = 2
    max_keypoints: int | None = None
    interpolation: bool = True
    mode: str = "full"

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        radii = (
            self.nms_radius.values()
            if isinstance(self.nms_radius, dict)
            else [self.nms_radius]
        )
        if any(r < 0 for r in radii):
            raise ValueError("nms_radius must be >= 0")
        if self.mode not in ("full", "short"):
            raise ValueError(f"mode must be 'full' or 'short', got {self.mode!r}")

    def radius_for(self, level_index: int) -> int:
        if isinstance(self.nms_radius, dict):
            return int(self.nms_radius[level_index])
        return int(self.nms_radius)


def nms(scores: np.ndarray, radius: int, tau: float) -> np.ndarray:
    """Tie-broken local-maximum suppression.

    A cell survives iff its score is >= tau and it beats every other cell
    within Chebyshev distance ``radius``; equal scores are won by the
    lexicographically smaller (row, col).  Returns (K, 2) int cells ordered
    by descending score, ties by (row, col).
    """
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    scores = np.asarray(scores, dtype=np.float64)
    if radius == 0:
        rows, cols = np.nonzero(scores >= tau)
    else:
        local_max = maximum_filter(scores, size=2 * radius + 1, mode="constant", cval=-np.inf)
        rows, cols = np.nonzero((scores >= tau) & (scores == local_max))
        keep = []
        h, w = scores.shape
        for i, (r, c) in enumerate(zip(rows, cols)):
            window = scores[
                max(0, r - radius) : min(h, r + radius + 1),
                max(0, c - radius) : min(w, c + radius + 1),
            ]
            tie_r, tie_c = np.nonzero(window == scores[r, c])
            tie_r = tie_r + max(0, r - radius)
            tie_c = tie_c + max(0, c - radius)
            if not np.any((tie_r < r) | ((tie_r == r) & (tie_c < c))):
                keep.append(i)
        rows, cols = rows[keep], cols[keep]
    order = np.lexsort((cols, rows, -scores[rows, cols]))
    return np.stack([rows[order], cols[order]], axis=1).astype(np.int64)


def refine_subpixel(scores: np.ndarray, cell: tuple[int, int]) -> tuple[float, float]:
    """Sub-cell offset (dx, dy) of the score peak from a 3x3 quadratic fit.

    Border cells and degenerate fits get (0, 0); the stationary point is
    clamped to [-0.5, 0.5] per axis.
    """
    scores = np.asarray(scores, dtype=np.float64)
    r, c = int(cell[0]), int(cell[1])
    h, w = scores.shape
    if r < 1 or c < 1 or r > h - 2 or c > w - 2:
        return (0.0, 0.0)
    patch = scores[r - 1 : r + 2, c - 1 : c + 2].reshape(-1)
    _, b, cc, d, e, f = _DESIGN_PINV @ patch
    det = 4.0 * d * f - e * e
    if abs(det) < 1e-12 * max(1.0, abs(d) + abs(f)) ** 2:
        return (0.0, 0.0)
    dx = (-2.0 * f * b + e * cc) / det
    dy = (-2.0 * d * cc + e * b) / det
    return (float(np.clip(dx, -0.5, 0.5)), float(np.clip(dy, -0.5, 0.5)))


def interpolate_descriptor(grid: FeatureGrid, image_point: np.ndarray) -> np.ndarray:
    """Bilinearly blended, L2-normalized descriptor at a sub-pixel image point."""
    x, y = np.asarray(image_point, dtype=np.float64).reshape(2)
    s = grid.level.stride
    u = x / s - 0.5  # continuous column
    v = y / s - 0.5  # continuous row
    h, w = grid.grid_shape
    if not (0.0 <= u <= w - 1.0 and 0.0 <= v <= h - 1.0):
        raise ValueError(
            f"point ({x}, {y}) maps to cell ({v:.2f}, {u:.2f}) outside grid {h}x{w}"
        )
    c0 = min(int(np.floor(u)), w - 2) if w > 1 else 0
    r0 = min(int(np.floor(v)), h - 2) if h > 1 else 0
    fu = u - c0
    fv = v - r0
    vals = grid.values
    blend = (
        (1 - fu) * (1 - fv) * vals[r0, c0]
        + fu * (1 - fv) * vals[r0, min(c0 + 1, w - 1)]
        + (1 - fu) * fv * vals[min(r0 + 1, h - 1), c0]
        + fu * fv * vals[min(r0 + 1, h - 1), min(c0 + 1, w - 1)]
    )
    norm = np.linalg.norm(blend)
    if norm < 1e-12:
        raise ValueError(f"zero descriptor at query point ({x}, {y})")
    return blend / norm


def shorten_descriptor(descriptor: np.ndarray) -> np.ndarray:
    """Keep the first half of a unit descriptor and renormalize."""
    half = descriptor[: len(descriptor) // 2]
    norm = np.linalg.norm(half)
    if norm < 1e-12:
        raise ValueError("short descriptor has zero norm")
    return half / norm


def extract(pyramid: DensePyramid, config: ExtractConfig) -> dict[int, list[Keypoint]]:
    """Detect keypoints per configured level.

    Returns {level_index: keypoints sorted by descending score}.
    """
    available = {g.level.level_index for g in pyramid.levels}
    missing = set(config.levels) - available
    if missing:
        raise ValueError(f"pyramid has no level(s) {sorted(missing)}")

    out: dict[int, list[Keypoint]] = {}
    for level_index in sorted(config.levels):
        grid = pyramid.level(level_index)
        stride = grid.level.stride
        cells = nms(grid.scores, config.radius_for(level_index), config.tau)
        if config.max_keypoints is not None:
            cells = cells[: config.max_keypoints]
        kps = []
        for r, c in cells:
            if config.interpolation:
                dx, dy = refine_subpixel(grid.scores, (r, c))
            else:
                dx, dy = 0.0, 0.0
            x = (c + 0.5 + dx) * stride
            y = (r + 0.5 + dy) * stride
            if config.interpolation:
                desc = interpolate_descriptor(grid, (x, y))
            else:
                raw = grid.values[r, c]
                norm = np.linalg.norm(raw)
                if norm < 1e-12:
                    continue
                desc = raw / norm
            if config.mode == "short":
                desc = shorten_descriptor(desc)
            kps.append(
                Keypoint(
                    level=level_index,
                    pixel=(float(x), float(y)),
                    score=float(grid.scores[r, c]),
                    descriptor=desc.astype(np.float64),
                )
            )
        out[level_index] = kps
    return out


def write_keypoints(path, keypoints_by_level: dict[int, list[Keypoint]]) -> None:
    """Serialize keypoints to the binary SFPK format (little-endian)."""
    records = [kp for level in sorted(keypoints_by_level) for kp in keypoints_by_level[level]]
    with open(path, "wb") as fh:
        fh.write(KEYPOINT_MAGIC)
        fh.write(struct.pack("<HI", KEYPOINT_VERSION, len(records)))
        for kp in records:
            desc = np.asarray(kp.descriptor, dtype="<f4")
            fh.write(
                struct.pack(
                    "<BfffH", kp.level, kp.pixel[0], kp.pixel[1], kp.score, len(desc)
                )
            )
            fh.write(desc.tobytes())


def read_keypoints(path) -> dict[int, list[Keypoint]]:
    """Read an SFPK file back into per-level keypoint lists."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 10 or data[:4] != KEYPOINT_MAGIC:
        raise FormatError(f"{path}: not an SFPK keypoint file")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != KEYPOINT_VERSION:
        raise FormatError(f"{path}: unsupported SFPK version {version}")
    offset = 10
    out: dict[int, list[Keypoint]] = {}
    for _ in range(count):
        if offset + 15 > len(data):
            raise FormatError(f"{path}: truncated keypoint record")
        level, x, y, score, dim = struct.unpack_from("<BfffH", data, offset)
        offset += 15
        if offset + 4 * dim > len(data):
            raise FormatError(f"{path}: truncated descriptor data")
        # f32 quantization keeps unit norms within ~1e-7, so no renormalization:
        # read -> write round-trips stay bit-identical
        desc = np.frombuffer(data, dtype="<f4", count=dim, offset=offset).astype(np.float64)
        offset += 4 * dim
        out.setdefault(level, []).append(
            Keypoint(level=level, pixel=(float(x), float(y)), score=float(score), descriptor=desc)
        )
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")
    return out

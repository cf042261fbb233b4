"""Evaluation metrics: pose errors and matching accuracy.

Translation error is measured between camera centers (not raw
translation vectors); rotation error is the geodesic angle between
rotations, in degrees.  Matching accuracy follows the standard
homography protocol: a match is correct at threshold tau when its
transferred pixel error does not exceed tau.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .geometry import Pose
from .synthetic import HomographyPair, apply_homography


@dataclass(frozen=True)
class PoseError:
    translation_m: float
    rotation_deg: float

    def __post_init__(self):
        if self.translation_m < 0 or not 0 <= self.rotation_deg <= 180 + 1e-9:
            raise ValueError(
                f"invalid errors ({self.translation_m} m, {self.rotation_deg} deg)"
            )


def pose_error(estimate: Pose, ground_truth: Pose) -> PoseError:
    """Camera-center distance (m) and rotation geodesic angle (deg).

    The angle is evaluated as atan2(sin, cos) from the relative rotation's
    skew part and trace; the plain arccos of the trace loses ~6 digits near
    0 deg (cos rounds to 1), which would drown the sub-microdegree errors
    this toolkit is tested to.
    """
    dt = float(np.linalg.norm(estimate.camera_center() - ground_truth.camera_center()))
    rel = estimate.rotation.T @ ground_truth.rotation
    cos = (np.trace(rel) - 1.0) / 2.0
    skew = np.array([rel[2, 1] - rel[1, 2], rel[0, 2] - rel[2, 0], rel[1, 0] - rel[0, 1]])
    sin = np.linalg.norm(skew) / 2.0
    angle = np.degrees(np.arctan2(sin, cos))
    return PoseError(translation_m=dt, rotation_deg=float(angle))


def median_errors(errors: Sequence[PoseError]) -> tuple[float, float]:
    """Component-wise medians (mean of the central pair for even counts)."""
    if not errors:
        raise ValueError("cannot take the median of no errors")
    t = np.median([e.translation_m for e in errors])
    r = np.median([e.rotation_deg for e in errors])
    return float(t), float(r)


# -- matching accuracy -----------------------------------------------------

Matcher = Callable[[HomographyPair], tuple[np.ndarray, np.ndarray]]

DEFAULT_THRESHOLDS = tuple(range(1, 11))


def mma(
    pairs: Iterable[HomographyPair],
    matcher: Matcher,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> np.ndarray:
    """Mean matching accuracy per threshold.

    Per pair, the fraction of matches whose homography-transferred error
    is <= tau; averaged over pairs.  A pair yielding zero matches counts
    as accuracy 0 at every threshold.
    """
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if thresholds.ndim != 1 or len(thresholds) == 0:
        raise ValueError("need at least one threshold")
    per_pair = []
    for pair in pairs:
        pts_a, pts_b = matcher(pair)
        pts_a = np.asarray(pts_a, dtype=np.float64).reshape(-1, 2)
        pts_b = np.asarray(pts_b, dtype=np.float64).reshape(-1, 2)
        if len(pts_a) != len(pts_b):
            raise ValueError("matcher returned unpaired points")
        if len(pts_a) == 0:
            per_pair.append(np.zeros(len(thresholds)))
            continue
        err = np.linalg.norm(apply_homography(pair.homography, pts_a) - pts_b, axis=1)
        per_pair.append((err[:, None] <= thresholds[None, :]).mean(axis=0))
    if not per_pair:
        raise ValueError("no pairs to evaluate")
    return np.mean(per_pair, axis=0)


def format_mma_curve(thresholds: Sequence[float], accuracies: np.ndarray) -> str:
    """Plot-ready (threshold, accuracy) pairs, one per line."""
    lines = [f"{float(t):g}\t{float(a):.6f}" for t, a in zip(thresholds, accuracies)]
    return "\n".join(lines) + "\n"


# -- results table ---------------------------------------------------------


@dataclass(frozen=True)
class ResultRow:
    label: str
    map_mb: float
    median_translation_m: float
    median_rotation_deg: float


def format_results_table(rows: Sequence[ResultRow]) -> str:
    """Aligned text table: config label, map size, median errors."""
    header = ("config", "map MB", "median cm", "median deg")
    body = [
        (
            r.label,
            f"{r.map_mb:.2f}",
            f"{100.0 * r.median_translation_m:.2f}",
            f"{r.median_rotation_deg:.2f}",
        )
        for r in rows
    ]
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(header)]
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(header), fmt(tuple("-" * w for w in widths))]
    lines.extend(fmt(b) for b in body)
    return "\n".join(lines) + "\n"

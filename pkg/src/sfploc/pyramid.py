"""Feature-pyramid data model and the sparsification math.

A dense pyramid holds per-level feature grids with per-cell keep scores.
Scores are squashed inner products of a per-level weight vector with the
cell descriptor; sampling (training) or thresholding (inference) turns them
into a binary mask, and masking the dense grid yields the sparse pyramid.
The compression cost is the expected number of stored descriptor scalars.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class LevelSpec:
    """One pyramid level: 1 is the shallowest, stride doubles per level."""

    level_index: int
    stride: int
    dim: int

    def __post_init__(self):
        if self.level_index < 1:
            raise ValueError(f"level_index must be >= 1, got {self.level_index}")
        if self.stride != 2 ** self.level_index:
            raise ValueError(
                f"stride must be 2**level_index ({2 ** self.level_index}), got {self.stride}"
            )
        if self.dim <= 0 or self.dim % 2 != 0:
            raise ValueError(f"descriptor dim must be positive and even, got {self.dim}")

    def grid_shape(self, image_shape: tuple[int, int]) -> tuple[int, int]:
        """(rows, cols) of this level's cell grid for an image of (H, W)."""
        h, w = image_shape
        return (-(-h // self.stride), -(-w // self.stride))


def default_level_specs(dims=(32, 64, 128)) -> list[LevelSpec]:
    """Three-level plan, shallow to deep; dims must be strictly increasing and even."""
    if any(b <= a for a, b in zip(dims, dims[1:])):
        raise ValueError(f"descriptor dims must strictly increase with depth, got {dims}")
    return [LevelSpec(i + 1, 2 ** (i + 1), d) for i, d in enumerate(dims)]


@dataclass(frozen=True)
class FeatureGrid:
    """Per-level features (H_i, W_i, d_i) and keep scores (H_i, W_i) in [0, 1]."""

    level: LevelSpec
    values: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[2] != self.level.dim:
            raise ValueError(
                f"values must be (H, W, {self.level.dim}), got {self.values.shape}"
            )
        if self.scores.shape != self.values.shape[:2]:
            raise ValueError(
                f"scores shape {self.scores.shape} != grid shape {self.values.shape[:2]}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature values must be finite")
        if self.scores.min(initial=0.0) < 0.0 or self.scores.max(initial=0.0) > 1.0:
            raise ValueError("scores must lie in [0, 1]")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.values.shape[:2]


@dataclass(frozen=True)
class DensePyramid:
    """Ordered feature grids, shallow to deep, plus source image dims."""

    levels: tuple[FeatureGrid, ...]
    image_shape: tuple[int, int]

    def __post_init__(self):
        if len(self.levels) < 2:
            raise ValueError("a pyramid needs at least 2 levels")
        indices = [g.level.level_index for g in self.levels]
        if indices != list(range(indices[0], indices[0] + len(indices))):
            raise ValueError(f"level indices must be contiguous, got {indices}")
        for grid in self.levels:
            expect = grid.level.grid_shape(self.image_shape)
            if grid.grid_shape != expect:
                raise ValueError(
                    f"level {grid.level.level_index} grid {grid.grid_shape} "
                    f"inconsistent with image {self.image_shape} (want {expect})"
                )

    def level(self, level_index: int) -> FeatureGrid:
        for grid in self.levels:
            if grid.level.level_index == level_index:
                return grid
        raise KeyError(f"pyramid has no level {level_index}")

    @property
    def deepest(self) -> FeatureGrid:
        return self.levels[-1]


@dataclass(frozen=True)
class BinaryMask:
    """Per-cell keep/drop bits for one level."""

    level: LevelSpec
    bits: np.ndarray

    def __post_init__(self):
        if self.bits.ndim != 2:
            raise ValueError(f"bits must be 2D, got shape {self.bits.shape}")
        if not np.isin(self.bits, (0, 1)).all():
            raise ValueError("mask entries must be exactly 0 or 1")


@dataclass(frozen=True)
class SparseLevel:
    """Kept cells of one level: coordinates, descriptors, and scores."""

    level: LevelSpec
    cells: np.ndarray        # (K, 2) int, (row, col)
    descriptors: np.ndarray  # (K, d_i)
    scores: np.ndarray       # (K,)
    grid_shape: tuple[int, int]

    def __post_init__(self):
        k = len(self.cells)
        if self.descriptors.shape != (k, self.level.dim) or self.scores.shape != (k,):
            raise ValueError("cells / descriptors / scores lengths disagree")
        if k:
            if self.cells.min() < 0 or np.any(self.cells >= np.array(self.grid_shape)):
                raise ValueError("cell coordinates out of grid bounds")
            rows, cols = self.cells[:, 0], self.cells[:, 1]
            flat = rows * self.grid_shape[1] + cols
            if len(np.unique(flat)) != k:
                raise ValueError("duplicate cells in sparse level")
            if self.scores.min() <= 0.0:
                raise ValueError("every stored descriptor needs score > 0")

    def __len__(self) -> int:
        return len(self.cells)


@dataclass(frozen=True)
class SparsePyramid:
    """Masked pyramid: per-level kept-cell sets."""

    levels: tuple[SparseLevel, ...]
    image_shape: tuple[int, int]

    def level(self, level_index: int) -> SparseLevel:
        for lv in self.levels:
            if lv.level.level_index == level_index:
                return lv
        raise KeyError(f"sparse pyramid has no level {level_index}")


def score_grid(features: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Per-cell keep probability: sigmoid of the inner product omega . f.

    ``features`` is (H, W, d); ``omega`` is the level's weight vector (d,).
    """
    features = np.asarray(features, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    if features.ndim != 3 or omega.ndim != 1 or features.shape[2] != omega.shape[0]:
        raise ValueError(
            f"omega length {omega.shape} must match feature dim {features.shape}"
        )
    if not np.all(np.isfinite(features)) or not np.all(np.isfinite(omega)):
        raise ValueError("inputs must be finite")
    logits = features @ omega
    # sigmoid, stable on both tails
    out = np.empty_like(logits)
    pos = logits >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-logits[pos]))
    ez = np.exp(logits[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sample_mask(scores: np.ndarray, level: LevelSpec, rng_seed: int) -> BinaryMask:
    """Independent Bernoulli draw per cell with the scores as probabilities."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.min(initial=0.0) < 0.0 or scores.max(initial=0.0) > 1.0:
        raise ValueError("scores must lie in [0, 1]")
    rng = np.random.default_rng(rng_seed)
    bits = (rng.random(scores.shape) < scores).astype(np.uint8)
    return BinaryMask(level, bits)


def threshold_mask(scores: np.ndarray, level: LevelSpec, tau: float) -> BinaryMask:
    """Deterministic inference-time mask: keep cells with score >= tau."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.min(initial=0.0) < 0.0 or scores.max(initial=0.0) > 1.0:
        raise ValueError("scores must lie in [0, 1]")
    return BinaryMask(level, (scores >= tau).astype(np.uint8))


def sparsify(grid: FeatureGrid, mask: BinaryMask) -> SparseLevel:
    """Keep the descriptors of mask-1 cells; mask-0 cells are dropped entirely."""
    if mask.bits.shape != grid.grid_shape:
        raise ValueError(
            f"mask shape {mask.bits.shape} != grid shape {grid.grid_shape}"
        )
    rows, cols = np.nonzero(mask.bits)
    cells = np.stack([rows, cols], axis=1).astype(np.int64)
    return SparseLevel(
        level=grid.level,
        cells=cells,
        descriptors=grid.values[rows, cols],
        scores=np.maximum(grid.scores[rows, cols], np.finfo(np.float64).tiny),
        grid_shape=grid.grid_shape,
    )


def densify(sparse: SparseLevel) -> np.ndarray:
    """Zero-filled dense grid holding the kept descriptors (inverse of sparsify)."""
    h, w = sparse.grid_shape
    out = np.zeros((h, w, sparse.level.dim), dtype=sparse.descriptors.dtype)
    if len(sparse):
        out[sparse.cells[:, 0], sparse.cells[:, 1]] = sparse.descriptors
    return out


def compression_cost(scores_per_level, dims) -> float:
    """Expected stored feature scalars: sum over levels of sum_j p_j * d_i."""
    scores_per_level = list(scores_per_level)
    dims = list(dims)
    if len(scores_per_level) != len(dims):
        raise ValueError(
            f"{len(scores_per_level)} score grids vs {len(dims)} dims"
        )
    total = 0.0
    for scores, d in zip(scores_per_level, dims):
        total += float(np.sum(np.asarray(scores, dtype=np.float64))) * float(d)
    return total

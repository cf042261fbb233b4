"""sfploc: sparse-feature-pyramid visual localization toolkit."""

from .autoencoder import (
    LossReport,
    NetConfig,
    PyramidAutoencoder,
    TrainBatch,
    build_network,
    decode,
    encode,
    grad_check,
    load_checkpoint,
    loss_report,
    save_checkpoint,
    train,
)
from .errors import (
    CheiralityError,
    DegenerateGeometryError,
    DivergenceError,
    FormatError,
    GeometryError,
    PoseEstimationError,
)
from .extraction import (
    ExtractConfig,
    Keypoint,
    extract,
    interpolate_descriptor,
    nms,
    read_keypoints,
    refine_subpixel,
    shorten_descriptor,
    write_keypoints,
)
from .geometry import Intrinsics, Pose, backproject, pixel_ray, project, project_points, triangulate
from .localization import (
    LocalizationResult,
    LocalizerConfig,
    MatchSet,
    gated_match,
    global_descriptor,
    localize,
    match_level,
    retrieve,
)
from .mapping import (
    FrameObservations,
    Landmark,
    LandmarkMap,
    MapConfig,
    MapFrame,
    build_map,
    deserialize,
    load_map,
    map_stats,
    save_map,
    serialize,
    shorten_descriptors,
)
from .pnp import RansacConfig, RefinementResult, pnp_ransac, refine_pose, solve_p3p
from .pyramid import (
    BinaryMask,
    DensePyramid,
    FeatureGrid,
    LevelSpec,
    SparseLevel,
    SparsePyramid,
    compression_cost,
    default_level_specs,
    densify,
    sample_mask,
    score_grid,
    sparsify,
    threshold_mask,
)
from .synthetic import SynthScene, synth_homography_pairs, synth_images, synth_scene

__version__ = "0.1.0"

__all__ = [
    "BinaryMask",
    "CheiralityError",
    "DegenerateGeometryError",
    "DensePyramid",
    "DivergenceError",
    "ExtractConfig",
    "FeatureGrid",
    "FormatError",
    "FrameObservations",
    "GeometryError",
    "Intrinsics",
    "Keypoint",
    "Landmark",
    "LandmarkMap",
    "LocalizationResult",
    "LocalizerConfig",
    "LossReport",
    "MapConfig",
    "MapFrame",
    "MatchSet",
    "NetConfig",
    "Pose",
    "PoseEstimationError",
    "PyramidAutoencoder",
    "RansacConfig",
    "RefinementResult",
    "SparseLevel",
    "SparsePyramid",
    "SynthScene",
    "TrainBatch",
    "backproject",
    "build_map",
    "build_network",
    "compression_cost",
    "decode",
    "default_level_specs",
    "densify",
    "deserialize",
    "encode",
    "extract",
    "gated_match",
    "global_descriptor",
    "grad_check",
    "interpolate_descriptor",
    "load_checkpoint",
    "load_map",
    "localize",
    "loss_report",
    "map_stats",
    "match_level",
    "nms",
    "pixel_ray",
    "pnp_ransac",
    "project",
    "project_points",
    "read_keypoints",
    "refine_pose",
    "refine_subpixel",
    "retrieve",
    "sample_mask",
    "save_checkpoint",
    "save_map",
    "score_grid",
    "serialize",
    "shorten_descriptor",
    "shorten_descriptors",
    "solve_p3p",
    "sparsify",
    "synth_homography_pairs",
    "synth_images",
    "synth_scene",
    "threshold_mask",
    "train",
    "write_keypoints",
]

"""Alignment of per-video 3D reconstructions, keypoint transfer and
text-to-voxel grounding."""

from ._core import (
    AlignmentGraph,
    CameraModel,
    GroundingModel,
    Keypoints3D,
    RansacConfig,
    ReconalignError,
    SimilarityTransform3,
    TrainConfig,
    TrainingPair,
    VoxelGrid,
    backproject_ray,
    build_voxel_grid,
    compose,
    fit_gt_transform,
    fit_similarity_umeyama,
    ground_query,
    hash_tokens,
    invert,
    load_alignment_graph,
    path_transform,
    pck_3d,
    project,
    solver_u,
    train_grounding,
    transfer_keypoints,
    triangulate,
)

__version__ = "1.0.0"

__all__ = [
    "AlignmentGraph",
    "CameraModel",
    "GroundingModel",
    "Keypoints3D",
    "RansacConfig",
    "ReconalignError",
    "SimilarityTransform3",
    "TrainConfig",
    "TrainingPair",
    "VoxelGrid",
    "backproject_ray",
    "build_voxel_grid",
    "compose",
    "fit_gt_transform",
    "fit_similarity_umeyama",
    "ground_query",
    "hash_tokens",
    "invert",
    "load_alignment_graph",
    "path_transform",
    "pck_3d",
    "project",
    "solver_u",
    "train_grounding",
    "transfer_keypoints",
    "triangulate",
]

"""Point clouds, rigid transforms and neighbourhood search."""

from scanloop.geometry.cloud import PointCloud
from scanloop.geometry.neighbors import NeighborIndex, knn, nearest_with_ties, radius_neighbors
from scanloop.geometry.sampling import estimate_normals, grid_subsample, overlap_ratio, voxelize
from scanloop.geometry.transform import (
    RigidTransform,
    apply_transform,
    random_transform,
    rotation_angle,
    se3_exp,
    se3_log,
)

__all__ = [
    "NeighborIndex",
    "PointCloud",
    "RigidTransform",
    "apply_transform",
    "estimate_normals",
    "grid_subsample",
    "knn",
    "nearest_with_ties",
    "overlap_ratio",
    "radius_neighbors",
    "random_transform",
    "rotation_angle",
    "se3_exp",
    "se3_log",
    "voxelize",
]

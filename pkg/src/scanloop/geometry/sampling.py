"""Voxel-grid subsampling, overlap ratio and normal estimation."""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from scanloop.common.exceptions import ContractError
from scanloop.geometry.cloud import PointCloud
from scanloop.geometry.transform import RigidTransform


@dataclass(frozen=True)
class VoxelGrid:
    """Voxel keys (sorted) and the voxel each input point falls in."""

    keys: np.ndarray
    assignment: np.ndarray


def voxelize(points: np.ndarray, cell: float) -> VoxelGrid:
    if cell <= 0:
        raise ContractError(f"cell must be positive, got {cell}")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return VoxelGrid(np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64))
    coords = np.floor(points / cell).astype(np.int64)
    keys, inverse = np.unique(coords, axis=0, return_inverse=True)
    return VoxelGrid(keys, np.asarray(inverse).reshape(-1))


def grid_subsample(cloud: PointCloud, cell: float) -> PointCloud:
    """One point per occupied voxel: the centroid of its members, in voxel-key order."""
    grid = voxelize(cloud.points, cell)
    if cloud.is_empty:
        return PointCloud.empty()
    n_vox = len(grid.keys)
    counts = np.bincount(grid.assignment, minlength=n_vox).astype(np.float64)
    sums = np.zeros((n_vox, 3))
    np.add.at(sums, grid.assignment, cloud.points)
    intensity = None
    if cloud.intensity is not None:
        intensity = np.bincount(grid.assignment, weights=cloud.intensity, minlength=n_vox) / counts
    return PointCloud(sums / counts[:, None], intensity)


def overlap_ratio(A: PointCloud, B: PointCloud, T_gt: RigidTransform, eps: float = 0.5) -> float:
    """Fraction of A's points within eps of B once A is moved into B's frame by T_gt.

    T_gt maps A-frame coordinates into the B frame, the same convention the
    registration solvers estimate.
    """
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    if A.is_empty:
        raise ContractError("overlap ratio of an empty cloud is undefined")
    if B.is_empty:
        return 0.0
    dists, _ = cKDTree(B.points).query(T_gt.apply(A.points), k=1)
    return float(np.mean(dists <= eps))


def estimate_normals(points: np.ndarray, k: int = 10) -> np.ndarray:
    """Unit normals from the smallest principal axis of each k-neighbourhood."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if n < 3:
        raise ContractError("normal estimation needs at least 3 points")
    k = min(k, n)
    _, idx = cKDTree(points).query(points, k=k)
    neighborhoods = points[idx]
    centered = neighborhoods - neighborhoods.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)

"""Point-to-node grouping of dense points into keypoint patches."""

from dataclasses import dataclass, field

import numpy as np

from scanloop.common.exceptions import ContractError
from scanloop.geometry.neighbors import NeighborIndex, nearest_with_ties
from scanloop.geometry.transform import RigidTransform


@dataclass(eq=False)
class PatchGrouping:
    """Each dense point belongs to the patch of its nearest keypoint."""

    assignment: np.ndarray
    distances: np.ndarray
    num_patches: int
    _members: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        # members of each patch ordered by (distance to its keypoint, point id)
        order = np.lexsort((np.arange(len(self.assignment)), self.distances, self.assignment))
        bounds = np.searchsorted(self.assignment[order], np.arange(self.num_patches + 1))
        self._members = [order[bounds[i] : bounds[i + 1]] for i in range(self.num_patches)]

    def __len__(self) -> int:
        return self.num_patches

    def members(self, patch: int) -> np.ndarray:
        """Point ids of a patch, ascending."""
        return np.sort(self._members[patch])

    def capped(self, patch: int, cap: int | None = None) -> np.ndarray:
        """The ``cap`` members closest to the keypoint (ties -> lower id)."""
        members = self._members[patch]
        return members if cap is None else members[:cap]

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.num_patches)


def group_patches(points: np.ndarray, keypoints: np.ndarray) -> PatchGrouping:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    keypoints = np.asarray(keypoints, dtype=np.float64).reshape(-1, 3)
    if len(keypoints) == 0:
        raise ContractError("cannot group points around zero keypoints")
    owner = nearest_with_ties(keypoints, points)
    distances = np.linalg.norm(points - keypoints[owner], axis=1)
    return PatchGrouping(owner, distances, len(keypoints))


def patch_overlap_matrix(
    grouping_a: PatchGrouping,
    points_a: np.ndarray,
    grouping_b: PatchGrouping,
    points_b: np.ndarray,
    T_gt: RigidTransform,
    eps: float,
) -> np.ndarray:
    """Entry (x, y): share of patch x's points lying within eps of patch y under T_gt.

    Empty source patches have zero overlap with everything.
    """
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    counts = np.zeros((len(grouping_a), len(grouping_b)))
    if len(points_a) == 0 or len(points_b) == 0:
        return counts
    hits = NeighborIndex(points_b).radius_batch(T_gt.apply(points_a), eps)
    for i, near in enumerate(hits):
        if near.size:
            counts[grouping_a.assignment[i], np.unique(grouping_b.assignment[near])] += 1.0
    sizes = grouping_a.sizes.astype(np.float64)
    return counts / np.maximum(sizes, 1.0)[:, None]

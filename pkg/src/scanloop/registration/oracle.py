"""Synthetic correspondence sets with a controlled inlier ratio."""

import numpy as np

from scanloop.common.exceptions import ContractError
from scanloop.geometry.transform import RigidTransform
from scanloop.matching.dense import CorrespondenceSet


def _ball(rng: np.random.Generator, center: np.ndarray, radius: float, n: int) -> np.ndarray:
    direction = rng.normal(size=(n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    return center + direction * radius * rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / 3.0)


def oracle_correspondences(
    T_gt: RigidTransform,
    rng: np.random.Generator,
    patches: int = 10,
    per_patch: int = 20,
    inlier_ratio: float = 1.0,
    noise: float = 0.0,
    extent: float = 20.0,
    patch_radius: float = 1.5,
) -> CorrespondenceSet:
    """Patch-structured pairs where ``round(inlier_ratio * patches)`` patches are clean.

    Clean patches map their points through ``T_gt`` (plus Gaussian noise);
    the remaining patches pair each point with a uniform random target, so
    the global inlier ratio equals the clean-patch share.
    """
    if not 0.0 <= inlier_ratio <= 1.0:
        raise ContractError(f"inlier ratio must lie in [0, 1], got {inlier_ratio}")
    if patches < 1 or per_patch < 3:
        raise ContractError("need at least one patch of three pairs")
    clean = int(round(inlier_ratio * patches))
    clean_ids = set(rng.permutation(patches)[:clean].tolist())
    centers = rng.uniform(-extent, extent, size=(patches, 3))

    source, target, patch_ids = [], [], []
    for pid in range(patches):
        pts = _ball(rng, centers[pid], patch_radius, per_patch)
        if pid in clean_ids:
            tgt = T_gt.apply(pts)
            if noise > 0:
                tgt = tgt + rng.normal(scale=noise, size=pts.shape)
        else:
            tgt = T_gt.translation + rng.uniform(-extent, extent, size=pts.shape)
        source.append(pts)
        target.append(tgt)
        patch_ids.append(np.full(per_patch, pid))
    weights = rng.uniform(0.5, 1.0, size=patches * per_patch)
    return CorrespondenceSet(
        np.concatenate(source), np.concatenate(target), weights, np.concatenate(patch_ids)
    )

"""Sparse keypoint matching, patch grouping and dense point matching."""

from scanloop.matching.assignment import (
    DENSE_DUSTBIN,
    SPARSE_DUSTBIN,
    SoftAssignment,
    SparseMatches,
    init_matching,
    match_keypoints,
    score_matrix,
    sinkhorn,
    topk_sparse,
)
from scanloop.matching.dense import (
    CorrespondenceSet,
    PatchMatch,
    dense_match,
    patch_assignments,
    read_correspondences_csv,
    union_pairs,
)
from scanloop.matching.grouping import PatchGrouping, group_patches, patch_overlap_matrix

__all__ = [
    "CorrespondenceSet",
    "DENSE_DUSTBIN",
    "PatchGrouping",
    "PatchMatch",
    "SPARSE_DUSTBIN",
    "SoftAssignment",
    "SparseMatches",
    "dense_match",
    "group_patches",
    "init_matching",
    "match_keypoints",
    "patch_assignments",
    "patch_overlap_matrix",
    "read_correspondences_csv",
    "score_matrix",
    "sinkhorn",
    "topk_sparse",
    "union_pairs",
]

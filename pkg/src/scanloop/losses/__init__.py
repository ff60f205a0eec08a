"""Training losses and the two-stage toy trainer."""

from scanloop.losses.gap import (
    GapTargets,
    dense_gap_loss,
    dense_ground_truth,
    gap_loss,
    sparse_gap_loss,
    sparse_ground_truth,
)
from scanloop.losses.keypoint import boundary_penalty, keypoint_loss
from scanloop.losses.report import TERMS, LossReport
from scanloop.losses.triplet import descriptor_distances, triplet_loss

__all__ = [
    "GapTargets",
    "LossReport",
    "TERMS",
    "boundary_penalty",
    "dense_gap_loss",
    "dense_ground_truth",
    "descriptor_distances",
    "gap_loss",
    "keypoint_loss",
    "sparse_gap_loss",
    "sparse_ground_truth",
    "triplet_loss",
]

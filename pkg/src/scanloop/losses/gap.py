"""Gap losses over dustbin-augmented assignment matrices and their ground truth."""

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from scanloop.common.exceptions import ContractError, GroundTruthError
from scanloop.compute import ops
from scanloop.compute.tensor import Tensor
from scanloop.geometry.transform import RigidTransform
from scanloop.matching.assignment import SoftAssignment
from scanloop.matching.dense import PatchMatch

logger = logging.getLogger(__name__)


@dataclass
class GapTargets:
    """Boolean (M+1)x(N+1) masks; entries in neither mask are left out of the loss."""

    positive: np.ndarray
    negative: np.ndarray

    def __post_init__(self):
        self.positive = np.asarray(self.positive, dtype=bool)
        self.negative = np.asarray(self.negative, dtype=bool)
        if self.positive.shape != self.negative.shape or self.positive.ndim != 2:
            raise GroundTruthError(
                f"mask shapes {self.positive.shape} and {self.negative.shape} differ"
            )
        if np.any(self.positive & self.negative):
            raise GroundTruthError("an entry is marked both positive and negative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.positive.shape

    @property
    def excluded(self) -> np.ndarray:
        return ~(self.positive | self.negative)


def _with_dustbins(positive: np.ndarray, negative: np.ndarray) -> GapTargets:
    """Pad interior masks; matchless rows and columns go to their dustbin."""
    m, n = positive.shape
    P = np.zeros((m + 1, n + 1), dtype=bool)
    N = np.zeros((m + 1, n + 1), dtype=bool)
    P[:m, :n] = positive
    N[:m, :n] = negative
    row_hit = positive.any(axis=1)
    col_hit = positive.any(axis=0)
    P[:m, n] = ~row_hit
    N[:m, n] = row_hit
    P[m, :n] = ~col_hit
    N[m, :n] = col_hit
    return GapTargets(P, N)


def sparse_ground_truth(overlap: np.ndarray, min_overlap: float = 0.1) -> GapTargets:
    """Patches match at ``overlap >= min_overlap`` and are negatives at zero overlap."""
    overlap = np.asarray(overlap, dtype=np.float64)
    if overlap.ndim != 2:
        raise GroundTruthError(f"overlap must be a matrix, got shape {overlap.shape}")
    if not np.all(np.isfinite(overlap)) or np.any(overlap < 0) or np.any(overlap > 1):
        raise GroundTruthError("overlap ratios must lie in [0, 1]")
    return _with_dustbins(overlap >= min_overlap, overlap == 0)


def dense_ground_truth(
    points_a: np.ndarray,
    points_b: np.ndarray,
    T_gt: RigidTransform,
    tau: float,
) -> GapTargets:
    """Point pairs closer than ``tau`` are positives, farther than ``2 tau`` negatives."""
    if tau <= 0:
        raise ContractError(f"tau must be positive, got {tau}")
    d = cdist(T_gt.apply(np.asarray(points_a, dtype=np.float64)), points_b)
    return _with_dustbins(d < tau, d > 2.0 * tau)


def _one_side(C: Tensor, P: np.ndarray, N: np.ndarray, eta: float) -> Tensor:
    """(1/M) sum_m log(sum_n [C_mn - r_m + eta]_+ over negatives + 1) for interior rows."""
    m = C.shape[0] - 1
    rows = ops.take_rows(C, np.arange(m))
    hardest = ops.reshape(ops.masked_max_rows(rows, P[:m]), (m, 1))
    hinge = ops.relu(rows - hardest + eta) * Tensor(N[:m].astype(np.float64))
    return ops.reduce_mean(ops.log(ops.reduce_sum(hinge, axis=1) + 1.0))


def gap_loss(C: Tensor, targets: GapTargets, eta: float) -> Tensor:
    """Row-wise plus column-wise gap loss on assignment probabilities ``C``."""
    if C.shape != targets.shape:
        raise GroundTruthError(f"assignment {C.shape} does not match targets {targets.shape}")
    m, n = C.shape[0] - 1, C.shape[1] - 1
    if m < 1 or n < 1:
        raise ContractError(f"gap loss needs interior entries, got {C.shape}")
    P, N = targets.positive, targets.negative
    if not (P[:m].any(axis=1).all() and P[:, :n].any(axis=0).all()):
        raise GroundTruthError("a keypoint has neither a true match nor a dustbin label")
    return _one_side(C, P, N, eta) + _one_side(C.T, P.T, N.T, eta)


def sparse_gap_loss(soft: SoftAssignment, targets: GapTargets, eta: float) -> Tensor:
    """L_c on the probabilities of a sparse soft assignment."""
    return gap_loss(ops.exp(soft.log_assignment), targets, eta)


def dense_gap_loss(
    patches: Sequence[PatchMatch],
    points_a: np.ndarray,
    points_b: np.ndarray,
    T_gt: RigidTransform,
    tau: float,
    eta: float,
) -> Tensor:
    """L_f = (1 / 2|M|) sum over matched patches of the per-patch gap loss.

    ``points_a`` and ``points_b`` are the dense points the patch members
    index into, each in its own frame.
    """
    if not patches:
        raise ContractError("dense gap loss over no matched patches")
    total = Tensor(0.0)
    for patch in patches:
        targets = dense_ground_truth(
            points_a[patch.members_a], points_b[patch.members_b], T_gt, tau
        )
        total = total + sparse_gap_loss(patch.soft, targets, eta)
    return ops.scale(total, 1.0 / (2 * len(patches)))

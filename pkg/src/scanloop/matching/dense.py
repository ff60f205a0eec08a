"""Dense point matching inside matched patch pairs."""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from scanloop.backbone.pyramid import FeatureLevel
from scanloop.common.exceptions import ContractError, NoMatchesError
from scanloop.compute import ops
from scanloop.compute.tensor import Tensor
from scanloop.matching.assignment import SoftAssignment, SparseMatches, score_matrix, sinkhorn
from scanloop.matching.grouping import PatchGrouping

logger = logging.getLogger(__name__)

CSV_HEADER = ["patch_id", "idx_a", "idx_b", "weight", "xa", "ya", "za", "xb", "yb", "zb"]


@dataclass(eq=False)
class PatchMatch:
    """One matched patch pair and the Sinkhorn output over its members."""

    patch_id: int
    keypoint_a: int
    keypoint_b: int
    members_a: np.ndarray
    members_b: np.ndarray
    soft: SoftAssignment


@dataclass(eq=False)
class CorrespondenceSet:
    """Weighted point pairs; ``source`` is in frame A, ``target`` in frame B."""

    source: np.ndarray
    target: np.ndarray
    weights: np.ndarray
    patch_ids: np.ndarray
    idx_a: np.ndarray | None = None
    idx_b: np.ndarray | None = None
    sparse: SparseMatches | None = None
    patches: list[PatchMatch] = field(default_factory=list)

    def __post_init__(self):
        self.source = np.asarray(self.source, dtype=np.float64).reshape(-1, 3)
        self.target = np.asarray(self.target, dtype=np.float64).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.patch_ids = np.asarray(self.patch_ids, dtype=np.int64).reshape(-1)
        n = len(self.source)
        if not (len(self.target) == len(self.weights) == len(self.patch_ids) == n):
            raise ContractError("correspondence arrays differ in length")
        if n and (np.any(self.weights <= 0) or np.any(self.weights > 1.0)):
            raise ContractError("correspondence weights must lie in (0, 1]")
        if self.idx_a is None:
            self.idx_a = np.arange(n)
        if self.idx_b is None:
            self.idx_b = np.arange(n)

    def __len__(self) -> int:
        return len(self.source)

    def by_patch(self) -> dict[int, np.ndarray]:
        """Row indices of each patch id, patch ids ascending."""
        return {int(p): np.flatnonzero(self.patch_ids == p) for p in np.unique(self.patch_ids)}

    def subset(self, rows: np.ndarray) -> "CorrespondenceSet":
        return CorrespondenceSet(
            self.source[rows],
            self.target[rows],
            self.weights[rows],
            self.patch_ids[rows],
            self.idx_a[rows],
            self.idx_b[rows],
            self.sparse,
        )

    @property
    def mean_weight(self) -> float:
        return float(self.weights.mean()) if len(self) else 0.0

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(CSV_HEADER)
            for k in range(len(self)):
                writer.writerow(
                    [int(self.patch_ids[k]), int(self.idx_a[k]), int(self.idx_b[k])]
                    + [repr(float(v)) for v in (self.weights[k], *self.source[k], *self.target[k])]
                )
        return path


def read_correspondences_csv(path: str | Path) -> CorrespondenceSet:
    with Path(path).open(newline="", encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    if not rows:
        return CorrespondenceSet(np.zeros((0, 3)), np.zeros((0, 3)), [], [])
    return CorrespondenceSet(
        [[float(r["xa"]), float(r["ya"]), float(r["za"])] for r in rows],
        [[float(r["xb"]), float(r["yb"]), float(r["zb"])] for r in rows],
        [float(r["weight"]) for r in rows],
        [int(r["patch_id"]) for r in rows],
        np.array([int(r["idx_a"]) for r in rows]),
        np.array([int(r["idx_b"]) for r in rows]),
    )


def union_pairs(log_assignment: np.ndarray) -> list[tuple[int, int]]:
    """Row-wise and column-wise maxima of a dustbin-padded matrix, dustbin hits dropped."""
    m, n = log_assignment.shape[0] - 1, log_assignment.shape[1] - 1
    pairs = set()
    row_best = np.argmax(log_assignment[:m, :], axis=1)
    for i in np.flatnonzero(row_best < n):
        pairs.add((int(i), int(row_best[i])))
    col_best = np.argmax(log_assignment[:, :n], axis=0)
    for j in np.flatnonzero(col_best < m):
        pairs.add((int(col_best[j]), int(j)))
    return sorted(pairs)


def patch_assignments(
    sparse: SparseMatches,
    grouping_a: PatchGrouping,
    grouping_b: PatchGrouping,
    dense_a: FeatureLevel,
    dense_b: FeatureLevel,
    alpha: Tensor,
    iterations: int,
    cap: int | None = 64,
) -> list[PatchMatch]:
    """Sinkhorn over the capped members of every keypoint pair with two non-empty patches."""
    patches = []
    for pid, (x, y) in enumerate(zip(sparse.rows, sparse.cols)):
        members_a = grouping_a.capped(int(x), cap)
        members_b = grouping_b.capped(int(y), cap)
        if members_a.size == 0 or members_b.size == 0:
            logger.debug("skipping empty patch pair", extra={"fields": {"patch": pid}})
            continue
        O = score_matrix(
            ops.take_rows(dense_a.descriptors, members_a),
            ops.take_rows(dense_b.descriptors, members_b),
        )
        soft = sinkhorn(O, alpha, iterations)
        patches.append(PatchMatch(pid, int(x), int(y), members_a, members_b, soft))
    return patches


def dense_match(
    sparse: SparseMatches,
    grouping_a: PatchGrouping,
    grouping_b: PatchGrouping,
    dense_a: FeatureLevel,
    dense_b: FeatureLevel,
    alpha: Tensor,
    iterations: int,
    cap: int | None = 64,
) -> CorrespondenceSet:
    """Sinkhorn within every matched patch pair, then the union of row and column maxima.

    The patch id of a pair is the position of its keypoint pair in ``sparse``.
    """
    kept: dict[tuple[int, int], tuple[float, int]] = {}
    patches = patch_assignments(
        sparse, grouping_a, grouping_b, dense_a, dense_b, alpha, iterations, cap
    )
    for patch in patches:
        z = patch.soft.log_assignment.numpy()
        pid = patch.patch_id
        for i, j in union_pairs(z):
            key = (int(patch.members_a[i]), int(patch.members_b[j]))
            weight = min(1.0, float(np.exp(z[i, j])))
            if key not in kept or weight > kept[key][0]:
                kept[key] = (weight, pid)

    if not kept:
        raise NoMatchesError(f"{len(sparse)} patch pairs produced no dense match")
    keys = sorted(kept, key=lambda k: (kept[k][1], k))
    idx_a = np.array([k[0] for k in keys], dtype=np.int64)
    idx_b = np.array([k[1] for k in keys], dtype=np.int64)
    return CorrespondenceSet(
        dense_a.points[idx_a],
        dense_b.points[idx_b],
        np.array([kept[k][0] for k in keys]),
        np.array([kept[k][1] for k in keys], dtype=np.int64),
        idx_a,
        idx_b,
        sparse,
        patches,
    )

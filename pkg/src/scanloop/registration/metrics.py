"""Registration error metrics and correspondence quality ratios."""

from dataclasses import dataclass, field

import numpy as np

from scanloop.geometry.neighbors import NeighborIndex
from scanloop.geometry.transform import RigidTransform, rotation_angle
from scanloop.matching.assignment import SparseMatches
from scanloop.matching.dense import CorrespondenceSet


@dataclass
class RegistrationMetrics:
    rte: float  # metres
    rre: float  # degrees
    rye: float  # degrees
    success: bool

    def as_dict(self) -> dict:
        return {"rte": self.rte, "rre": self.rre, "rye": self.rye, "success": self.success}


def registration_metrics(
    est: RigidTransform,
    gt: RigidTransform,
    rre_threshold_deg: float = 5.0,
    rte_threshold: float = 2.0,
) -> RegistrationMetrics:
    rte = float(np.linalg.norm(est.translation - gt.translation))
    rre = float(np.degrees(rotation_angle(gt.rotation.T @ est.rotation)))
    dyaw = abs(est.yaw - gt.yaw) % (2.0 * np.pi)
    rye = float(np.degrees(min(dyaw, 2.0 * np.pi - dyaw)))
    return RegistrationMetrics(rte, rre, rye, rre < rre_threshold_deg and rte < rte_threshold)


@dataclass
class MatchQualityReport:
    """Point-level and patch-level correspondence ratios; ``None`` where undefined."""

    ir: float | None = None
    mr: float | None = None
    hr: float | None = None
    pir: float | None = None
    pmr: float | None = None
    phr: float | None = None
    undefined: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "ir": self.ir,
            "mr": self.mr,
            "hr": self.hr,
            "pir": self.pir,
            "pmr": self.pmr,
            "phr": self.phr,
            "undefined": list(self.undefined),
        }


def _ratio(report: MatchQualityReport, name: str, num: float, den: float) -> None:
    if den == 0:
        report.undefined.append(name)
        return
    setattr(report, name, float(num) / float(den))


def match_quality(
    corr: CorrespondenceSet,
    sparse: SparseMatches | None,
    points_a: np.ndarray,
    points_b: np.ndarray,
    T_gt: RigidTransform,
    patch_overlap: np.ndarray | None = None,
    inlier_threshold: float = 0.6,
) -> MatchQualityReport:
    """IR/MR/HR over dense pairs and PIR/PMR/PHR over keypoint pairs.

    A dense point of A is a true point when its ground-truth image lies
    within ``inlier_threshold`` of some point of B. A keypoint pair is true
    when its patches overlap (``patch_overlap[x, y] > 0``).
    """
    report = MatchQualityReport()
    residual = np.linalg.norm(T_gt.apply(corr.source) - corr.target, axis=1)
    correct = residual < inlier_threshold
    _ratio(report, "ir", correct.sum(), len(corr))

    points_a = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
    if len(points_b):
        _, nn = NeighborIndex(points_b).nearest(T_gt.apply(points_a))
        true_points = np.flatnonzero(nn < inlier_threshold)
    else:
        true_points = np.zeros(0, dtype=np.int64)
    matched = np.isin(true_points, corr.idx_a)
    correctly_matched = np.isin(true_points, corr.idx_a[correct])
    _ratio(report, "mr", correctly_matched.sum(), len(true_points))
    _ratio(report, "hr", matched.sum(), len(true_points))

    if sparse is None or patch_overlap is None:
        report.undefined.extend(["pir", "pmr", "phr"])
        return report
    truth = patch_overlap > 0
    hits = truth[sparse.rows, sparse.cols]
    _ratio(report, "pir", hits.sum(), len(sparse))
    true_pairs = set(zip(*np.nonzero(truth)))
    found = {(int(x), int(y)) for x, y in zip(sparse.rows, sparse.cols)} & {
        (int(x), int(y)) for x, y in true_pairs
    }
    _ratio(report, "pmr", len(found), len(true_pairs))
    true_patches = np.flatnonzero(truth.any(axis=1))
    _ratio(report, "phr", np.isin(true_patches, sparse.rows).sum(), len(true_patches))
    return report
